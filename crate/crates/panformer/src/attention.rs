//! Windowed multi-head self-attention and cross-attention blocks, patch
//! embedding, and patch merging.
//!
//! Attention is computed inside non-overlapping w×w spatial windows; blocks
//! with a nonzero shift roll the grid by (-s,-s) before partitioning and
//! mask token pairs that straddle a wrapped seam, following the shifted
//! window scheme.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{kernels, Engine, ParamId, ParamSet, Tensor};
use crate::{PfError, Result};

pub const LN_EPS: f64 = 1e-5;
pub const MASK_SENTINEL: f64 = -1e4;
pub const INIT_STD: f64 = 0.02;

/// Attention score scaling convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Divide scores by sqrt(C / heads).
    PerHead,
    /// Divide scores by sqrt(C).
    FullDim,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    pub mlp_ratio: usize,
    pub scale_mode: ScaleMode,
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(PfError::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.shift >= self.window {
            return Err(PfError::Config(format!(
                "shift {} must be smaller than window {}",
                self.shift, self.window
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn score_scale(&self) -> f64 {
        match self.scale_mode {
            ScaleMode::PerHead => 1.0 / (self.head_dim() as f64).sqrt(),
            ScaleMode::FullDim => 1.0 / (self.dim as f64).sqrt(),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter bundles and initialization
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct LinearP {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormP {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub k: LinearP,
    pub v: LinearP,
    pub q: LinearP,
    pub proj: LinearP,
}

/// Self-attention block: pre-norm windowed attention plus a 2-layer MLP,
/// both wrapped in residual connections.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub cfg: AttnConfig,
    pub norm1: NormP,
    pub attn: AttnWeights,
    pub norm2: NormP,
    pub mlp1: LinearP,
    pub mlp2: LinearP,
}

/// Cross-attention block: K,V come from stream `a`, Q (and the residual)
/// from stream `b`; each stream has its own pre-attention norm.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub cfg: AttnConfig,
    pub norm1_kv: NormP,
    pub norm1_q: NormP,
    pub attn: AttnWeights,
    pub norm2: NormP,
    pub mlp1: LinearP,
    pub mlp2: LinearP,
}

/// Linear patch embedding: p×p×Bin patches to C channels.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub in_ch: usize,
    pub lin: LinearP,
}

/// Patch merging: 2×2 neighborhoods concatenated to 4C then projected to C.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub dim: usize,
    pub lin: LinearP,
}

/// One sample from N(0, std²) truncated to ±2 std.
pub fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        // Box-Muller
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn init_linear(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<LinearP> {
    let data: Vec<f64> = (0..fan_in * fan_out).map(|_| trunc_normal(rng, INIT_STD)).collect();
    let w = ps.add(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], data)?)?;
    let b = ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(LinearP { w, b })
}

pub fn init_norm(ps: &mut ParamSet, name: &str, dim: usize) -> Result<NormP> {
    let gamma = ps.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
    let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
    Ok(NormP { gamma, beta })
}

fn init_attn(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    dim: usize,
) -> Result<AttnWeights> {
    Ok(AttnWeights {
        k: init_linear(ps, rng, &format!("{name}.k"), dim, dim)?,
        v: init_linear(ps, rng, &format!("{name}.v"), dim, dim)?,
        q: init_linear(ps, rng, &format!("{name}.q"), dim, dim)?,
        proj: init_linear(ps, rng, &format!("{name}.proj"), dim, dim)?,
    })
}

impl SelfAttentionBlock {
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttnConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        Ok(SelfAttentionBlock {
            cfg,
            norm1: init_norm(ps, &format!("{name}.norm1"), c)?,
            attn: init_attn(ps, rng, &format!("{name}.attn"), c)?,
            norm2: init_norm(ps, &format!("{name}.norm2"), c)?,
            mlp1: init_linear(ps, rng, &format!("{name}.mlp1"), c, c * cfg.mlp_ratio)?,
            mlp2: init_linear(ps, rng, &format!("{name}.mlp2"), c * cfg.mlp_ratio, c)?,
        })
    }
}

impl CrossAttentionBlock {
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttnConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        Ok(CrossAttentionBlock {
            cfg,
            norm1_kv: init_norm(ps, &format!("{name}.norm1_kv"), c)?,
            norm1_q: init_norm(ps, &format!("{name}.norm1_q"), c)?,
            attn: init_attn(ps, rng, &format!("{name}.attn"), c)?,
            norm2: init_norm(ps, &format!("{name}.norm2"), c)?,
            mlp1: init_linear(ps, rng, &format!("{name}.mlp1"), c, c * cfg.mlp_ratio)?,
            mlp2: init_linear(ps, rng, &format!("{name}.mlp2"), c * cfg.mlp_ratio, c)?,
        })
    }

    /// View a self-attention block as a cross block with shared norms,
    /// for the degenerate cross(F,F) == self(F) identity.
    pub fn from_sab(sab: &SelfAttentionBlock) -> Self {
        CrossAttentionBlock {
            cfg: sab.cfg,
            norm1_kv: sab.norm1,
            norm1_q: sab.norm1,
            attn: sab.attn,
            norm2: sab.norm2,
            mlp1: sab.mlp1,
            mlp2: sab.mlp2,
        }
    }
}

impl PatchEmbed {
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        patch: usize,
        in_ch: usize,
        dim: usize,
    ) -> Result<Self> {
        let lin = init_linear(ps, rng, name, patch * patch * in_ch, dim)?;
        Ok(PatchEmbed { patch, in_ch, lin })
    }
}

impl PatchMerge {
    pub fn init(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Result<Self> {
        let lin = init_linear(ps, rng, name, 4 * dim, dim)?;
        Ok(PatchMerge { dim, lin })
    }
}

// ---------------------------------------------------------------------------
// Shifted-window attention mask
// ---------------------------------------------------------------------------

/// Per-window additive score mask for a shifted grid, flattened
/// `[nWin, T, T]` with T = win². Zero everywhere when `shift == 0`.
///
/// Region ids are assigned in the shifted coordinate frame with the usual
/// three bands per axis; pairs with different ids receive the sentinel.
pub fn build_window_mask(h: usize, w: usize, win: usize, shift: usize) -> Vec<f64> {
    let t = win * win;
    let nwin = (h / win) * (w / win);
    if shift == 0 {
        return vec![0.0; nwin * t * t];
    }
    let band = |coord: usize, extent: usize| -> usize {
        if coord < extent - win {
            0
        } else if coord < extent - shift {
            1
        } else {
            2
        }
    };
    let mut ids = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            ids[y * w + x] = band(y, h) * 3 + band(x, w);
        }
    }
    let mut mask = vec![0.0; nwin * t * t];
    let gw = w / win;
    for wy in 0..h / win {
        for wx in 0..gw {
            let wi = wy * gw + wx;
            for p in 0..t {
                let idp = ids[(wy * win + p / win) * w + wx * win + p % win];
                for q in 0..t {
                    let idq = ids[(wy * win + q / win) * w + wx * win + q % win];
                    if idp != idq {
                        mask[(wi * t + p) * t + q] = MASK_SENTINEL;
                    }
                }
            }
        }
    }
    mask
}

/// Tile a `[nWin, T, T]` window mask over batch and heads into the full
/// score shape `[N·nWin·heads, T, T]`.
pub fn tile_mask(window_mask: &[f64], n: usize, nwin: usize, heads: usize, t: usize) -> Vec<f64> {
    let mut full = Vec::with_capacity(n * nwin * heads * t * t);
    for _ in 0..n {
        for wi in 0..nwin {
            let block = &window_mask[wi * t * t..(wi + 1) * t * t];
            for _ in 0..heads {
                full.extend_from_slice(block);
            }
        }
    }
    full
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Multi-head attention over token sets `[B, T, C]`.
///
/// Scores are softmax(Q·Kᵀ·scale + mask) per head; the weighted values are
/// concatenated over heads and passed through the output projection.
/// `mask`, when present, must already be tiled to `[B·heads, T, T]`.
pub fn multi_head_attention<E: Engine>(
    e: &mut E,
    ps: &ParamSet,
    wts: &AttnWeights,
    cfg: &AttnConfig,
    k_src: &E::Val,
    v_src: &E::Val,
    q_src: &E::Val,
    mask: Option<&Tensor>,
) -> Result<E::Val> {
    let ks = e.shape(k_src);
    let vs = e.shape(v_src);
    let qs = e.shape(q_src);
    if ks.len() != 3 || ks != vs || ks != qs {
        return Err(PfError::Dim(format!(
            "attention streams must share [B,T,C]: K {ks:?}, V {vs:?}, Q {qs:?}"
        )));
    }
    let (b, t, c) = (ks[0], ks[1], ks[2]);
    if c != cfg.dim {
        return Err(PfError::Dim(format!("token dim {c} != configured dim {}", cfg.dim)));
    }
    let (heads, d) = (cfg.heads, cfg.head_dim());

    let kw = e.param(ps, wts.k.w);
    let kb = e.param(ps, wts.k.b);
    let vw = e.param(ps, wts.v.w);
    let vb = e.param(ps, wts.v.b);
    let qw = e.param(ps, wts.q.w);
    let qb = e.param(ps, wts.q.b);

    let k = e.linear(k_src, &kw, Some(&kb))?;
    let v = e.linear(v_src, &vw, Some(&vb))?;
    let q = e.linear(q_src, &qw, Some(&qb))?;

    let (hs_shape, hs_idx) = kernels::head_split_index(b, t, heads, d);
    let hs_idx = Rc::new(hs_idx);
    let k = e.gather(&k, hs_shape.clone(), hs_idx.clone());
    let v = e.gather(&v, hs_shape.clone(), hs_idx.clone());
    let q = e.gather(&q, hs_shape, hs_idx);

    let scores = e.matmul(&q, &k, true)?;
    let mut scores = e.scale(&scores, cfg.score_scale());
    if let Some(m) = mask {
        let m = e.constant(m.clone());
        scores = e.add(&scores, &m)?;
    }
    let weights = e.softmax_last(&scores);
    let out = e.matmul(&weights, &v, false)?;

    let (hm_shape, hm_idx) = kernels::head_merge_index(b, t, heads, d);
    let out = e.gather(&out, hm_shape, Rc::new(hm_idx));

    let pw = e.param(ps, wts.proj.w);
    let pb = e.param(ps, wts.proj.b);
    e.linear(&out, &pw, Some(&pb))
}

fn norm<E: Engine>(e: &mut E, ps: &ParamSet, n: &NormP, x: &E::Val) -> Result<E::Val> {
    let g = e.param(ps, n.gamma);
    let b = e.param(ps, n.beta);
    e.layer_norm(x, &g, &b, LN_EPS)
}

fn check_grid<E: Engine>(e: &E, x: &E::Val, dim: usize) -> Result<(usize, usize, usize, usize)> {
    let s = e.shape(x);
    if s.len() != 4 || s[3] != dim {
        return Err(PfError::Dim(format!("expected [N,H,W,{dim}] feature map, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn pad_to_windows<E: Engine>(
    e: &mut E,
    x: &E::Val,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    win: usize,
) -> (E::Val, usize, usize) {
    let ph = h.div_ceil(win) * win;
    let pw = w.div_ceil(win) * win;
    if ph == h && pw == w {
        return (x.clone(), h, w);
    }
    let (shape, idx) = kernels::pad_hw_index(n, h, w, c, ph, pw);
    (e.gather(x, shape, Rc::new(idx)), ph, pw)
}

/// Windowed (optionally shifted + masked) attention over padded grids.
/// Both sources must be `[N, PH, PW, C]` with PH, PW multiples of the window.
fn windowed_attention<E: Engine>(
    e: &mut E,
    ps: &ParamSet,
    wts: &AttnWeights,
    cfg: &AttnConfig,
    kv: &E::Val,
    q: &E::Val,
) -> Result<E::Val> {
    let (n, ph, pw, c) = check_grid(e, kv, cfg.dim)?;
    let win = cfg.window;
    let s = cfg.shift;

    let (kv, q) = if s > 0 {
        let (shape, idx) = kernels::cyclic_shift_index(n, ph, pw, c, -(s as isize), -(s as isize));
        let idx = Rc::new(idx);
        (e.gather(kv, shape.clone(), idx.clone()), e.gather(q, shape, idx))
    } else {
        (kv.clone(), q.clone())
    };

    let (wshape, widx) = kernels::window_partition_index(n, ph, pw, c, win);
    let widx = Rc::new(widx);
    let kv_tok = e.gather(&kv, wshape.clone(), widx.clone());
    let q_tok = e.gather(&q, wshape, widx);

    let nwin = (ph / win) * (pw / win);
    let t = win * win;
    let mask = if s > 0 {
        let wm = build_window_mask(ph, pw, win, s);
        let full = tile_mask(&wm, n, nwin, cfg.heads, t);
        Some(Tensor::new(vec![n * nwin * cfg.heads, t, t], full)?)
    } else {
        None
    };

    let out = multi_head_attention(e, ps, wts, cfg, &kv_tok, &kv_tok, &q_tok, mask.as_ref())?;

    let (rshape, ridx) = kernels::window_reverse_index(n, ph, pw, c, win);
    let out = e.gather(&out, rshape, Rc::new(ridx));

    if s > 0 {
        let (shape, idx) = kernels::cyclic_shift_index(n, ph, pw, c, s as isize, s as isize);
        Ok(e.gather(&out, shape, Rc::new(idx)))
    } else {
        Ok(out)
    }
}

fn mlp_residual<E: Engine>(
    e: &mut E,
    ps: &ParamSet,
    norm2: &NormP,
    mlp1: &LinearP,
    mlp2: &LinearP,
    x: &E::Val,
) -> Result<E::Val> {
    let n2 = norm(e, ps, norm2, x)?;
    let w1 = e.param(ps, mlp1.w);
    let b1 = e.param(ps, mlp1.b);
    let h = e.linear(&n2, &w1, Some(&b1))?;
    let h = e.gelu(&h);
    let w2 = e.param(ps, mlp2.w);
    let b2 = e.param(ps, mlp2.b);
    let h = e.linear(&h, &w2, Some(&b2))?;
    e.add(x, &h)
}

/// Pre-norm self-attention block on an `[N,H,W,C]` feature map.
pub fn sab_forward<E: Engine>(
    e: &mut E,
    ps: &ParamSet,
    blk: &SelfAttentionBlock,
    x: &E::Val,
) -> Result<E::Val> {
    let (n, h, w, c) = check_grid(e, x, blk.cfg.dim)?;
    let normed = norm(e, ps, &blk.norm1, x)?;
    let (padded, ph, pw) = pad_to_windows(e, &normed, n, h, w, c, blk.cfg.window);
    let attn = windowed_attention(e, ps, &blk.attn, &blk.cfg, &padded, &padded)?;
    let attn = if (ph, pw) != (h, w) {
        let (shape, idx) = kernels::crop_hw_index(n, ph, pw, c, h, w);
        e.gather(&attn, shape, Rc::new(idx))
    } else {
        attn
    };
    let x1 = e.add(x, &attn)?;
    mlp_residual(e, ps, &blk.norm2, &blk.mlp1, &blk.mlp2, &x1)
}

/// Pre-norm cross-attention block: K,V from `f_a`, Q and residual from `f_b`.
pub fn cab_forward<E: Engine>(
    e: &mut E,
    ps: &ParamSet,
    blk: &CrossAttentionBlock,
    f_a: &E::Val,
    f_b: &E::Val,
) -> Result<E::Val> {
    let (n, h, w, c) = check_grid(e, f_a, blk.cfg.dim)?;
    let sb = e.shape(f_b);
    if sb != [n, h, w, c] {
        return Err(PfError::Dim(format!(
            "cross-attention streams differ: K/V {:?} vs Q {:?}",
            [n, h, w, c],
            sb
        )));
    }
    let kv_n = norm(e, ps, &blk.norm1_kv, f_a)?;
    let q_n = norm(e, ps, &blk.norm1_q, f_b)?;
    let (kv_p, ph, pw) = pad_to_windows(e, &kv_n, n, h, w, c, blk.cfg.window);
    let (q_p, _, _) = pad_to_windows(e, &q_n, n, h, w, c, blk.cfg.window);
    let attn = windowed_attention(e, ps, &blk.attn, &blk.cfg, &kv_p, &q_p)?;
    let attn = if (ph, pw) != (h, w) {
        let (shape, idx) = kernels::crop_hw_index(n, ph, pw, c, h, w);
        e.gather(&attn, shape, Rc::new(idx))
    } else {
        attn
    };
    let x1 = e.add(f_b, &attn)?;
    mlp_residual(e, ps, &blk.norm2, &blk.mlp1, &blk.mlp2, &x1)
}

/// Split `[N,H0,W0,Bin]` into p×p patches and embed each to C channels with
/// one shared linear layer.
pub fn patch_embed<E: Engine>(
    e: &mut E,
    ps: &ParamSet,
    emb: &PatchEmbed,
    img: &E::Val,
) -> Result<E::Val> {
    let s = e.shape(img);
    if s.len() != 4 || s[3] != emb.in_ch {
        return Err(PfError::Dim(format!(
            "patch_embed expects [N,H,W,{}], got {s:?}",
            emb.in_ch
        )));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let p = emb.patch;
    if h % p != 0 || w % p != 0 {
        return Err(PfError::Dim(format!(
            "patch size {p} does not divide spatial extents {h}x{w}"
        )));
    }
    let (shape, idx) = kernels::patch_gather_index(n, h, w, emb.in_ch, p);
    let patches = e.gather(img, shape, Rc::new(idx));
    let lw = e.param(ps, emb.lin.w);
    let lb = e.param(ps, emb.lin.b);
    e.linear(&patches, &lw, Some(&lb))
}

/// Merge 2×2 neighborhoods of `[N,2H',2W',C]` into `[N,H',W',C]`.
pub fn patch_merge<E: Engine>(
    e: &mut E,
    ps: &ParamSet,
    merge: &PatchMerge,
    x: &E::Val,
) -> Result<E::Val> {
    let (n, h, w, c) = check_grid(e, x, merge.dim)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(PfError::Dim(format!(
            "patch_merge requires even spatial extents, got {h}x{w}"
        )));
    }
    let (shape, idx) = kernels::patch_gather_index(n, h, w, c, 2);
    let gathered = e.gather(x, shape, Rc::new(idx));
    let lw = e.param(ps, merge.lin.w);
    let lb = e.param(ps, merge.lin.b);
    e.linear(&gathered, &lw, Some(&lb))
}
