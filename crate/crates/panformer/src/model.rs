//! The assembled PanFormer: dual-path windowed-attention encoder,
//! cross-modality fusion (four selectable strategies), and the
//! pixel-shuffle restoration head.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cab_forward, patch_embed, patch_merge, sab_forward, AttnConfig, CrossAttentionBlock,
    PatchEmbed, PatchMerge, ScaleMode, SelfAttentionBlock,
};
use crate::tensor::{kernels, Engine, ParamId, ParamSet, Tensor};
use crate::{PfError, Result};

/// How the fusion module combines the two encoded streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// [SA(F_pan); SA(F_ms)]
    Concat,
    /// [CA(F_pan, F_ms); SA(F_ms)] — PAN supplies K,V; MS supplies Q.
    PanXMs,
    /// [SA(F_pan); CA(F_ms, F_pan)] — MS supplies K,V; PAN supplies Q.
    MsXPan,
    /// [CA(F_pan, F_ms); CA(F_ms, F_pan)]
    Bidirectional,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::Concat,
        FusionVariant::PanXMs,
        FusionVariant::MsXPan,
        FusionVariant::Bidirectional,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionVariant::Concat => "concat",
            FusionVariant::PanXMs => "pan_x_ms",
            FusionVariant::MsXPan => "ms_x_pan",
            FusionVariant::Bidirectional => "bidirectional",
        }
    }
}

fn default_c() -> usize {
    64
}
fn default_heads() -> usize {
    8
}
fn default_window() -> usize {
    4
}
fn default_sab_per_path() -> usize {
    4
}
fn default_cab_count() -> usize {
    6
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_bands() -> usize {
    4
}
fn default_scale() -> usize {
    4
}
fn default_variant() -> FusionVariant {
    FusionVariant::Bidirectional
}
fn default_scale_mode() -> ScaleMode {
    ScaleMode::PerHead
}

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanFormerConfig {
    #[serde(default = "default_c")]
    pub c: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_sab_per_path")]
    pub sab_per_path: usize,
    #[serde(default = "default_cab_count")]
    pub cab_count: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_bands")]
    pub bands: usize,
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default = "default_variant")]
    pub fusion_variant: FusionVariant,
    #[serde(default = "default_scale_mode")]
    pub scale_mode: ScaleMode,
}

impl Default for PanFormerConfig {
    fn default() -> Self {
        PanFormerConfig {
            c: default_c(),
            heads: default_heads(),
            window: default_window(),
            sab_per_path: default_sab_per_path(),
            cab_count: default_cab_count(),
            mlp_ratio: default_mlp_ratio(),
            bands: default_bands(),
            scale: default_scale(),
            fusion_variant: default_variant(),
            scale_mode: default_scale_mode(),
        }
    }
}

impl PanFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.heads == 0 || self.c % self.heads != 0 {
            return Err(PfError::Config(format!(
                "c {} must be a positive multiple of heads {}",
                self.c, self.heads
            )));
        }
        if self.sab_per_path == 0 || self.sab_per_path % 2 != 0 {
            return Err(PfError::Config(format!(
                "sab_per_path {} must be even (patch merging sits at the midpoint)",
                self.sab_per_path
            )));
        }
        if self.cab_count == 0 {
            return Err(PfError::Config("cab_count must be >= 1".into()));
        }
        if self.scale != 4 {
            return Err(PfError::Config(format!(
                "scale must be 4 (restoration head performs two x2 upscales), got {}",
                self.scale
            )));
        }
        if self.bands == 0 || self.window == 0 {
            return Err(PfError::Config("bands and window must be positive".into()));
        }
        Ok(())
    }

    /// Attention config for the i-th block of a stack; shift alternates
    /// 0 / w/2 on even/odd indices.
    fn attn_cfg(&self, index: usize) -> AttnConfig {
        AttnConfig {
            dim: self.c,
            heads: self.heads,
            window: self.window,
            shift: if index % 2 == 1 { self.window / 2 } else { 0 },
            mlp_ratio: self.mlp_ratio,
            scale_mode: self.scale_mode,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvP {
    pub w: ParamId,
    pub b: ParamId,
}

fn init_conv(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
) -> Result<ConvP> {
    let bound = 1.0 / ((9 * cin) as f64).sqrt();
    let data: Vec<f64> = (0..9 * cin * cout).map(|_| rng.gen_range(-bound..bound)).collect();
    let w = ps.add(format!("{name}.w"), Tensor::new(vec![3, 3, cin, cout], data)?)?;
    let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]))?;
    Ok(ConvP { w, b })
}

#[derive(Clone, Debug)]
enum Fusion {
    Concat { pan: Vec<SelfAttentionBlock>, ms: Vec<SelfAttentionBlock> },
    PanXMs { cross: Vec<CrossAttentionBlock>, ms: Vec<SelfAttentionBlock> },
    MsXPan { pan: Vec<SelfAttentionBlock>, cross: Vec<CrossAttentionBlock> },
    Bidirectional { pan_x_ms: Vec<CrossAttentionBlock>, ms_x_pan: Vec<CrossAttentionBlock> },
}

/// Restoration head: 4 convolutions and 2 pixel shuffles.
#[derive(Clone, Debug)]
struct Head {
    conv1: ConvP,
    conv2: ConvP,
    conv3: ConvP,
    conv4: ConvP,
}

/// The parameterized PanFormer network.
#[derive(Clone, Debug)]
pub struct PanFormerModel {
    pub cfg: PanFormerConfig,
    pub params: ParamSet,
    pan_embed: PatchEmbed,
    pan_sabs: Vec<SelfAttentionBlock>,
    pan_merge: PatchMerge,
    ms_embed: PatchEmbed,
    ms_sabs: Vec<SelfAttentionBlock>,
    fusion: Fusion,
    head: Head,
}

impl PanFormerModel {
    /// Construct with freshly initialized weights drawn from `rng`.
    pub fn init(cfg: PanFormerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let c = cfg.c;

        let pan_embed = PatchEmbed::init(&mut ps, rng, "pan.embed", 2, 1, c)?;
        let mut pan_sabs = Vec::new();
        for i in 0..cfg.sab_per_path {
            pan_sabs.push(SelfAttentionBlock::init(
                &mut ps,
                rng,
                &format!("pan.sab{i}"),
                cfg.attn_cfg(i),
            )?);
        }
        let pan_merge = PatchMerge::init(&mut ps, rng, "pan.merge", c)?;

        let ms_embed = PatchEmbed::init(&mut ps, rng, "ms.embed", 1, cfg.bands, c)?;
        let mut ms_sabs = Vec::new();
        for i in 0..cfg.sab_per_path {
            ms_sabs.push(SelfAttentionBlock::init(
                &mut ps,
                rng,
                &format!("ms.sab{i}"),
                cfg.attn_cfg(i),
            )?);
        }

        let sab_chain = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, path: &str| -> Result<Vec<SelfAttentionBlock>> {
            (0..cfg.cab_count)
                .map(|i| {
                    SelfAttentionBlock::init(ps, rng, &format!("fuse.{path}.sab{i}"), cfg.attn_cfg(i))
                })
                .collect()
        };
        let cab_chain = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, path: &str| -> Result<Vec<CrossAttentionBlock>> {
            (0..cfg.cab_count)
                .map(|i| {
                    CrossAttentionBlock::init(ps, rng, &format!("fuse.{path}.cab{i}"), cfg.attn_cfg(i))
                })
                .collect()
        };
        let fusion = match cfg.fusion_variant {
            FusionVariant::Concat => Fusion::Concat {
                pan: sab_chain(&mut ps, rng, "pan")?,
                ms: sab_chain(&mut ps, rng, "ms")?,
            },
            FusionVariant::PanXMs => Fusion::PanXMs {
                cross: cab_chain(&mut ps, rng, "pan_x_ms")?,
                ms: sab_chain(&mut ps, rng, "ms")?,
            },
            FusionVariant::MsXPan => Fusion::MsXPan {
                pan: sab_chain(&mut ps, rng, "pan")?,
                cross: cab_chain(&mut ps, rng, "ms_x_pan")?,
            },
            FusionVariant::Bidirectional => Fusion::Bidirectional {
                pan_x_ms: cab_chain(&mut ps, rng, "pan_x_ms")?,
                ms_x_pan: cab_chain(&mut ps, rng, "ms_x_pan")?,
            },
        };

        let head = Head {
            conv1: init_conv(&mut ps, rng, "head.conv1", 2 * c, 4 * c)?,
            conv2: init_conv(&mut ps, rng, "head.conv2", c, 4 * c)?,
            conv3: init_conv(&mut ps, rng, "head.conv3", c, c)?,
            conv4: init_conv(&mut ps, rng, "head.conv4", c, cfg.bands)?,
        };

        Ok(PanFormerModel {
            cfg,
            params: ps,
            pan_embed,
            pan_sabs,
            pan_merge,
            ms_embed,
            ms_sabs,
            fusion,
            head,
        })
    }

    /// Deterministic construction from a seed (named init sub-stream).
    pub fn init_seeded(cfg: PanFormerConfig, seed: u64) -> Result<Self> {
        let mut rng = crate::training::substream(seed, "init");
        Self::init(cfg, &mut rng)
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// PAN path: embed(p=2), half the SABs at 2H×2W, patch merge, the rest
    /// at H×W.
    pub fn encode_pan<E: Engine>(&self, e: &mut E, pan: &E::Val) -> Result<E::Val> {
        let mut x = patch_embed(e, &self.params, &self.pan_embed, pan)?;
        let half = self.cfg.sab_per_path / 2;
        for blk in &self.pan_sabs[..half] {
            x = sab_forward(e, &self.params, blk, &x)?;
        }
        x = patch_merge(e, &self.params, &self.pan_merge, &x)?;
        for blk in &self.pan_sabs[half..] {
            x = sab_forward(e, &self.params, blk, &x)?;
        }
        Ok(x)
    }

    /// MS path: embed(p=1) and all SABs at native resolution.
    pub fn encode_ms<E: Engine>(&self, e: &mut E, ms: &E::Val) -> Result<E::Val> {
        let mut x = patch_embed(e, &self.params, &self.ms_embed, ms)?;
        for blk in &self.ms_sabs {
            x = sab_forward(e, &self.params, blk, &x)?;
        }
        Ok(x)
    }

    /// Fuse the encoded streams into a `[N,H,W,2C]` representation.
    ///
    /// In cross-attention chains the Q-side stream evolves block by block
    /// while K and V always come from the other modality's encoder output.
    pub fn fuse<E: Engine>(&self, e: &mut E, f_pan: &E::Val, f_ms: &E::Val) -> Result<E::Val> {
        let sp = e.shape(f_pan);
        let sm = e.shape(f_ms);
        if sp != sm {
            return Err(PfError::Dim(format!("fuse stream shapes differ: {sp:?} vs {sm:?}")));
        }
        let run_sabs = |e: &mut E, blocks: &[SelfAttentionBlock], x: &E::Val| -> Result<E::Val> {
            let mut cur = x.clone();
            for blk in blocks {
                cur = sab_forward(e, &self.params, blk, &cur)?;
            }
            Ok(cur)
        };
        let run_cabs =
            |e: &mut E, blocks: &[CrossAttentionBlock], kv: &E::Val, q: &E::Val| -> Result<E::Val> {
                let mut cur = q.clone();
                for blk in blocks {
                    cur = cab_forward(e, &self.params, blk, kv, &cur)?;
                }
                Ok(cur)
            };
        let (left, right) = match &self.fusion {
            Fusion::Concat { pan, ms } => (run_sabs(e, pan, f_pan)?, run_sabs(e, ms, f_ms)?),
            Fusion::PanXMs { cross, ms } => {
                (run_cabs(e, cross, f_pan, f_ms)?, run_sabs(e, ms, f_ms)?)
            }
            Fusion::MsXPan { pan, cross } => {
                (run_sabs(e, pan, f_pan)?, run_cabs(e, cross, f_ms, f_pan)?)
            }
            Fusion::Bidirectional { pan_x_ms, ms_x_pan } => {
                (run_cabs(e, pan_x_ms, f_pan, f_ms)?, run_cabs(e, ms_x_pan, f_ms, f_pan)?)
            }
        };
        let c = self.cfg.c;
        let rows: usize = sp[..3].iter().product();
        let (ia, ib) = kernels::concat_last_index(rows, c, c);
        let out_shape = vec![sp[0], sp[1], sp[2], 2 * c];
        let la = e.gather(&left, out_shape.clone(), Rc::new(ia));
        let rb = e.gather(&right, out_shape, Rc::new(ib));
        e.add(&la, &rb)
    }

    /// Restoration head: `[N,H,W,2C]` to `[N,4H,4W,B]`.
    pub fn restore<E: Engine>(&self, e: &mut E, f: &E::Val) -> Result<E::Val> {
        let ps = &self.params;
        let conv = |e: &mut E, p: &ConvP, x: &E::Val| -> Result<E::Val> {
            let w = e.param(ps, p.w);
            let b = e.param(ps, p.b);
            e.conv2d(x, &w, &b)
        };
        let shuffle = |e: &mut E, x: &E::Val| -> Result<E::Val> {
            let s = e.shape(x);
            if s[3] % 4 != 0 {
                return Err(PfError::Dim(format!("pixel shuffle needs channels % 4 == 0, got {s:?}")));
            }
            let (shape, idx) = kernels::pixel_shuffle_index(s[0], s[1], s[2], s[3] / 4, 2);
            Ok(e.gather(x, shape, Rc::new(idx)))
        };

        let x = conv(e, &self.head.conv1, f)?;
        let x = shuffle(e, &x)?;
        let x = e.relu(&x);
        let x = conv(e, &self.head.conv2, &x)?;
        let x = shuffle(e, &x)?;
        let x = e.relu(&x);
        let x = conv(e, &self.head.conv3, &x)?;
        let x = e.relu(&x);
        conv(e, &self.head.conv4, &x)
    }

    /// Full forward: PAN `[N,4H,4W,1]` + MS `[N,H,W,B]` to `[N,4H,4W,B]`.
    pub fn forward<E: Engine>(&self, e: &mut E, pan: &E::Val, ms: &E::Val) -> Result<E::Val> {
        let sp = e.shape(pan);
        let sm = e.shape(ms);
        if sp.len() != 4 || sm.len() != 4 {
            return Err(PfError::Dim(format!("forward expects NHWC inputs, got {sp:?} / {sm:?}")));
        }
        if sp[0] != sm[0] || sp[1] != 4 * sm[1] || sp[2] != 4 * sm[2] || sp[3] != 1
            || sm[3] != self.cfg.bands
        {
            return Err(PfError::Dim(format!(
                "PAN {sp:?} must be [N,4H,4W,1] matching MS {sm:?} = [N,H,W,{}]",
                self.cfg.bands
            )));
        }
        let f_pan = self.encode_pan(e, pan)?;
        let f_ms = self.encode_ms(e, ms)?;
        let fused = self.fuse(e, &f_pan, &f_ms)?;
        self.restore(e, &fused)
    }
}
