//! Numerical kernels shared by the eager engine and the autodiff tape.
//!
//! Forward kernels compute plain `f64` buffers; `*_bwd` kernels implement
//! the matching vector-Jacobian products. Data-movement operations
//! (windowing, shifts, pixel shuffle, padding, patch gathering) are all
//! expressed as a single `gather` primitive driven by precomputed index
//! tables, whose backward is a scatter-add.

use std::f64::consts::PI;

/// C = A·B (or A·Bᵀ), batched over the leading axis.
///
/// `a` is `[batch, m, k]`; `b` is `[batch, k, n]`, or `[batch, n, k]` when
/// `transpose_b` is set.
pub fn matmul_fwd(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let c = &mut c[bi * m * n..(bi + 1) * m * n];
        if transpose_b {
            // b stored as [n, k]: row dot products
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let br = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for t in 0..k {
                        s += ar[t] * br[t];
                    }
                    c[i * n + j] = s;
                }
            }
        } else {
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                let cr = &mut c[i * n..(i + 1) * n];
                for t in 0..k {
                    let av = ar[t];
                    let br = &b[t * n..(t + 1) * n];
                    for j in 0..n {
                        cr[j] += av * br[j];
                    }
                }
            }
        }
    }
    c
}

/// Gradients of batched matmul w.r.t. both inputs.
pub fn matmul_bwd(
    a: &[f64],
    b: &[f64],
    dc: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; batch * m * k];
    let mut db = vec![0.0; b.len()];
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let dc = &dc[bi * m * n..(bi + 1) * m * n];
        let da = &mut da[bi * m * k..(bi + 1) * m * k];
        let db = &mut db[bi * k * n..(bi + 1) * k * n];
        if transpose_b {
            // c[i,j] = Σ_t a[i,t]·b[j,t]
            for i in 0..m {
                let dar = &mut da[i * k..(i + 1) * k];
                let dcr = &dc[i * n..(i + 1) * n];
                for j in 0..n {
                    let g = dcr[j];
                    let br = &b[j * k..(j + 1) * k];
                    for t in 0..k {
                        dar[t] += g * br[t];
                    }
                }
            }
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                let dcr = &dc[i * n..(i + 1) * n];
                for j in 0..n {
                    let g = dcr[j];
                    let dbr = &mut db[j * k..(j + 1) * k];
                    for t in 0..k {
                        dbr[t] += g * ar[t];
                    }
                }
            }
        } else {
            // da = dc·bᵀ ; db = aᵀ·dc
            for i in 0..m {
                let dcr = &dc[i * n..(i + 1) * n];
                let dar = &mut da[i * k..(i + 1) * k];
                for t in 0..k {
                    let br = &b[t * n..(t + 1) * n];
                    let mut s = 0.0;
                    for j in 0..n {
                        s += dcr[j] * br[j];
                    }
                    dar[t] += s;
                }
            }
            for i in 0..m {
                let ar = &a[i * k..(i + 1) * k];
                let dcr = &dc[i * n..(i + 1) * n];
                for t in 0..k {
                    let av = ar[t];
                    let dbr = &mut db[t * n..(t + 1) * n];
                    for j in 0..n {
                        dbr[j] += av * dcr[j];
                    }
                }
            }
        }
    }
    (da, db)
}

/// Numerically stable softmax along an arbitrary axis.
pub fn softmax_fwd(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for t in 0..len {
                mx = mx.max(x[base + t * inner]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                let e = (x[base + t * inner] - mx).exp();
                y[base + t * inner] = e;
                sum += e;
            }
            for t in 0..len {
                y[base + t * inner] /= sum;
            }
        }
    }
    y
}

/// Softmax backward from the saved output: dx = y ⊙ (dy − Σ y·dy).
pub fn softmax_bwd(y: &[f64], dy: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for t in 0..len {
                let p = base + t * inner;
                dot += y[p] * dy[p];
            }
            for t in 0..len {
                let p = base + t * inner;
                dx[p] = y[p] * (dy[p] - dot);
            }
        }
    }
    dx
}

/// LayerNorm over the last axis with population variance.
pub fn layer_norm_fwd(x: &[f64], c: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let rows = x.len() / c;
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let yr = &mut y[r * c..(r + 1) * c];
        for i in 0..c {
            yr[i] = (xr[i] - mean) * inv * gamma[i] + beta[i];
        }
    }
    y
}

/// LayerNorm backward; returns (dx, dgamma, dbeta).
pub fn layer_norm_bwd(
    x: &[f64],
    c: usize,
    gamma: &[f64],
    eps: f64,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let cf = c as f64;
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let dyr = &dy[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / cf;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
        let inv = 1.0 / (var + eps).sqrt();
        let mut g_mean = 0.0;
        let mut gx_mean = 0.0;
        for i in 0..c {
            let xh = (xr[i] - mean) * inv;
            let g = dyr[i] * gamma[i];
            g_mean += g;
            gx_mean += g * xh;
            dgamma[i] += dyr[i] * xh;
            dbeta[i] += dyr[i];
        }
        g_mean /= cf;
        gx_mean /= cf;
        let dxr = &mut dx[r * c..(r + 1) * c];
        for i in 0..c {
            let xh = (xr[i] - mean) * inv;
            let g = dyr[i] * gamma[i];
            dxr[i] = inv * (g - g_mean - xh * gx_mean);
        }
    }
    (dx, dgamma, dbeta)
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal PDF.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact (Gaussian-CDF) GELU: x·Φ(x).
pub fn gelu_fwd(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * norm_cdf(v)).collect()
}

pub fn gelu_bwd(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| g * (norm_cdf(v) + v * norm_pdf(v)))
        .collect()
}

pub fn relu_fwd(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_bwd(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// Broadcast-add a `[c]` bias over the trailing axis of `[rows, c]`.
pub fn add_bias_fwd(x: &[f64], b: &[f64]) -> Vec<f64> {
    let c = b.len();
    let mut y = x.to_vec();
    for r in 0..x.len() / c {
        let yr = &mut y[r * c..(r + 1) * c];
        for i in 0..c {
            yr[i] += b[i];
        }
    }
    y
}

pub fn add_bias_bwd_bias(dy: &[f64], c: usize) -> Vec<f64> {
    let mut db = vec![0.0; c];
    for r in 0..dy.len() / c {
        let dyr = &dy[r * c..(r + 1) * c];
        for i in 0..c {
            db[i] += dyr[i];
        }
    }
    db
}

/// out[j] = in[idx[j]] with idx = -1 meaning 0 (zero padding).
pub fn gather_fwd(x: &[f64], idx: &[i64]) -> Vec<f64> {
    idx.iter()
        .map(|&i| if i < 0 { 0.0 } else { x[i as usize] })
        .collect()
}

/// Scatter-add transpose of `gather_fwd`.
pub fn gather_bwd(dy: &[f64], idx: &[i64], in_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; in_len];
    for (j, &i) in idx.iter().enumerate() {
        if i >= 0 {
            dx[i as usize] += dy[j];
        }
    }
    dx
}

/// Same-padded 3×3 stride-1 convolution, NHWC with kernel [3,3,Cin,Cout].
pub fn conv2d_fwd(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; n * h * wd * cout];
    for ni in 0..n {
        for oy in 0..h {
            for ox in 0..wd {
                let yr = &mut y[((ni * h + oy) * wd + ox) * cout..][..cout];
                yr.copy_from_slice(b);
                for ky in 0..3usize {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = ox as isize + kx as isize - 1;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xr = &x[((ni * h + iy as usize) * wd + ix as usize) * cin..][..cin];
                        let wk = &w[(ky * 3 + kx) * cin * cout..][..cin * cout];
                        for ci in 0..cin {
                            let xv = xr[ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let wr = &wk[ci * cout..(ci + 1) * cout];
                            for co in 0..cout {
                                yr[co] += xv * wr[co];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Conv backward; returns (dx, dw, db).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for ni in 0..n {
        for oy in 0..h {
            for ox in 0..wd {
                let dyr = &dy[((ni * h + oy) * wd + ox) * cout..][..cout];
                for co in 0..cout {
                    db[co] += dyr[co];
                }
                for ky in 0..3usize {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = ox as isize + kx as isize - 1;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xoff = ((ni * h + iy as usize) * wd + ix as usize) * cin;
                        let woff = (ky * 3 + kx) * cin * cout;
                        for ci in 0..cin {
                            let wr = &w[woff + ci * cout..][..cout];
                            let dwr = &mut dw[woff + ci * cout..][..cout];
                            let xv = x[xoff + ci];
                            let mut s = 0.0;
                            for co in 0..cout {
                                s += dyr[co] * wr[co];
                                dwr[co] += xv * dyr[co];
                            }
                            dx[xoff + ci] += s;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Gather index tables
// ---------------------------------------------------------------------------

/// Index table for partitioning `[N,H,W,C]` into `[N·nWin, w², C]` windows.
///
/// Windows are enumerated row-major over the window grid; tokens are
/// row-major within each window.
pub fn window_partition_index(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    win: usize,
) -> (Vec<usize>, Vec<i64>) {
    let gh = h / win;
    let gw = w / win;
    let out_shape = vec![n * gh * gw, win * win, c];
    let mut idx = Vec::with_capacity(n * h * w * c);
    for ni in 0..n {
        for wy in 0..gh {
            for wx in 0..gw {
                for ty in 0..win {
                    for tx in 0..win {
                        let src = ((ni * h + wy * win + ty) * w + wx * win + tx) * c;
                        for ci in 0..c {
                            idx.push((src + ci) as i64);
                        }
                    }
                }
            }
        }
    }
    (out_shape, idx)
}

/// Inverse of `window_partition_index`: `[N·nWin, w², C]` back to `[N,H,W,C]`.
pub fn window_reverse_index(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    win: usize,
) -> (Vec<usize>, Vec<i64>) {
    let gw = w / win;
    let out_shape = vec![n, h, w, c];
    let mut idx = Vec::with_capacity(n * h * w * c);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (wy, ty) = (y / win, y % win);
                let (wx, tx) = (x / win, x % win);
                let wi = (ni * (h / win) + wy) * gw + wx;
                let src = (wi * win * win + ty * win + tx) * c;
                for ci in 0..c {
                    idx.push((src + ci) as i64);
                }
            }
        }
    }
    (out_shape, idx)
}

/// Toroidal roll of the spatial axes of `[N,H,W,C]` by (dy, dx).
pub fn cyclic_shift_index(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    dy: isize,
    dx: isize,
) -> (Vec<usize>, Vec<i64>) {
    let out_shape = vec![n, h, w, c];
    let mut idx = Vec::with_capacity(n * h * w * c);
    for ni in 0..n {
        for y in 0..h {
            let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
            for x in 0..w {
                let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                let src = ((ni * h + sy) * w + sx) * c;
                for ci in 0..c {
                    idx.push((src + ci) as i64);
                }
            }
        }
    }
    (out_shape, idx)
}

/// Pixel shuffle: `[N,H,W,C·r²]` to `[N,rH,rW,C]`,
/// out[n, r·h+dy, r·w+dx, c] = in[n, h, w, c·r² + dy·r + dx].
pub fn pixel_shuffle_index(
    n: usize,
    h: usize,
    w: usize,
    c_out: usize,
    r: usize,
) -> (Vec<usize>, Vec<i64>) {
    let cin = c_out * r * r;
    let out_shape = vec![n, h * r, w * r, c_out];
    let mut idx = Vec::with_capacity(n * h * w * cin);
    for ni in 0..n {
        for oy in 0..h * r {
            let (sy, dy) = (oy / r, oy % r);
            for ox in 0..w * r {
                let (sx, dx) = (ox / r, ox % r);
                let base = ((ni * h + sy) * w + sx) * cin;
                for ci in 0..c_out {
                    idx.push((base + ci * r * r + dy * r + dx) as i64);
                }
            }
        }
    }
    (out_shape, idx)
}

/// Zero-pad `[N,H,W,C]` on the bottom/right to `[N,nh,nw,C]`.
pub fn pad_hw_index(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    nh: usize,
    nw: usize,
) -> (Vec<usize>, Vec<i64>) {
    let out_shape = vec![n, nh, nw, c];
    let mut idx = Vec::with_capacity(n * nh * nw * c);
    for ni in 0..n {
        for y in 0..nh {
            for x in 0..nw {
                for ci in 0..c {
                    if y < h && x < w {
                        idx.push((((ni * h + y) * w + x) * c + ci) as i64);
                    } else {
                        idx.push(-1);
                    }
                }
            }
        }
    }
    (out_shape, idx)
}

/// Crop `[N,H,W,C]` to its top-left `[N,nh,nw,C]` corner.
pub fn crop_hw_index(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    nh: usize,
    nw: usize,
) -> (Vec<usize>, Vec<i64>) {
    let out_shape = vec![n, nh, nw, c];
    let mut idx = Vec::with_capacity(n * nh * nw * c);
    for ni in 0..n {
        for y in 0..nh {
            for x in 0..nw {
                let src = ((ni * h + y) * w + x) * c;
                for ci in 0..c {
                    idx.push((src + ci) as i64);
                }
            }
        }
    }
    (out_shape, idx)
}

/// Gather non-overlapping p×p patches of `[N,H,W,Cin]` into
/// `[N, H/p, W/p, p·p·Cin]`, patch contents flattened row-major
/// (dy, dx, channel).
pub fn patch_gather_index(
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    p: usize,
) -> (Vec<usize>, Vec<i64>) {
    let out_shape = vec![n, h / p, w / p, p * p * cin];
    let mut idx = Vec::with_capacity(n * h * w * cin);
    for ni in 0..n {
        for py in 0..h / p {
            for px in 0..w / p {
                for dy in 0..p {
                    for dx in 0..p {
                        let src = ((ni * h + py * p + dy) * w + px * p + dx) * cin;
                        for ci in 0..cin {
                            idx.push((src + ci) as i64);
                        }
                    }
                }
            }
        }
    }
    (out_shape, idx)
}

/// Concatenate two `[.., Ca]` and `[.., Cb]` tensors along the last axis,
/// expressed as two gathers into the `[.., Ca+Cb]` output (the missing half
/// maps to -1 / zero, so concat = gather_a + gather_b).
pub fn concat_last_index(
    rows: usize,
    ca: usize,
    cb: usize,
) -> (Vec<i64>, Vec<i64>) {
    let c = ca + cb;
    let mut ia = Vec::with_capacity(rows * c);
    let mut ib = Vec::with_capacity(rows * c);
    for r in 0..rows {
        for ci in 0..c {
            if ci < ca {
                ia.push((r * ca + ci) as i64);
                ib.push(-1);
            } else {
                ia.push(-1);
                ib.push((r * cb + ci - ca) as i64);
            }
        }
    }
    (ia, ib)
}

/// Split heads: `[B, T, h·d]` to `[B·h, T, d]`.
pub fn head_split_index(b: usize, t: usize, heads: usize, d: usize) -> (Vec<usize>, Vec<i64>) {
    let out_shape = vec![b * heads, t, d];
    let mut idx = Vec::with_capacity(b * heads * t * d);
    for bi in 0..b {
        for hi in 0..heads {
            for ti in 0..t {
                let src = (bi * t + ti) * heads * d + hi * d;
                for di in 0..d {
                    idx.push((src + di) as i64);
                }
            }
        }
    }
    (out_shape, idx)
}

/// Merge heads: `[B·h, T, d]` back to `[B, T, h·d]`.
pub fn head_merge_index(b: usize, t: usize, heads: usize, d: usize) -> (Vec<usize>, Vec<i64>) {
    let out_shape = vec![b, t, heads * d];
    let mut idx = Vec::with_capacity(b * heads * t * d);
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..heads {
                let src = ((bi * heads + hi) * t + ti) * d;
                for di in 0..d {
                    idx.push((src + di) as i64);
                }
            }
        }
    }
    (out_shape, idx)
}
