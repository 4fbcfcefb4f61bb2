//! Reference-based quality metrics: PSNR, SSIM, ERGAS, SCC, plus residual
//! image emission and dataset-level evaluation.
//!
//! All metrics run in 64-bit on raw sample values in [0, L] with
//! L = 2^bit_depth - 1.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_pfr, DatasetManifest, RasterImage};
use crate::{PfError, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same_shape(pred: &RasterImage, gt: &RasterImage) -> Result<()> {
    if pred.width != gt.width
        || pred.height != gt.height
        || pred.bands != gt.bands
        || pred.bit_depth != gt.bit_depth
    {
        return Err(PfError::Dim(format!(
            "metric inputs differ: {}x{}x{} depth {} vs {}x{}x{} depth {}",
            pred.width,
            pred.height,
            pred.bands,
            pred.bit_depth,
            gt.width,
            gt.height,
            gt.bands,
            gt.bit_depth
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; +inf for identical inputs.
pub fn psnr(pred: &RasterImage, gt: &RasterImage) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let l = gt.max_value() as f64;
    let mse = pred
        .samples
        .iter()
        .zip(&gt.samples)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / pred.samples.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (l * l / mse).log10())
    }
}

/// Mean structural similarity under an 11×11 Gaussian window (sigma 1.5,
/// valid-region sliding), averaged over positions then bands.
pub fn ssim(pred: &RasterImage, gt: &RasterImage) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (w, h, nb) = (pred.width, pred.height, pred.bands);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(PfError::Param(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let l = gt.max_value() as f64;
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);

    // 2-D Gaussian window, normalized
    let half = SSIM_WINDOW / 2;
    let mut win = [[0.0f64; SSIM_WINDOW]; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - half as f64;
            let dx = j as f64 - half as f64;
            *v = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            sum += *v;
        }
    }
    for row in win.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    let mut band_mean = 0.0;
    for b in 0..nb {
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in 0..=h - SSIM_WINDOW {
            for x in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, row) in win.iter().enumerate() {
                    for (j, &g) in row.iter().enumerate() {
                        let a = pred.get(y + i, x + j, b) as f64;
                        let c = gt.get(y + i, x + j, b) as f64;
                        mx += g * a;
                        my += g * c;
                        mxx += g * a * a;
                        myy += g * c * c;
                        mxy += g * a * c;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += s;
                count += 1;
            }
        }
        band_mean += acc / count as f64;
    }
    Ok(band_mean / nb as f64)
}

/// Relative dimensionless global error in synthesis;
/// 100·(h/l)·sqrt(mean_b (RMSE_b/μ_b)²).
pub fn ergas(pred: &RasterImage, gt: &RasterImage, h_over_l: f64) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (w, h, nb) = (pred.width, pred.height, pred.bands);
    let npix = (w * h) as f64;
    let mut acc = 0.0;
    for b in 0..nb {
        let mut mean = 0.0;
        let mut se = 0.0;
        for y in 0..h {
            for x in 0..w {
                let g = gt.get(y, x, b) as f64;
                let d = pred.get(y, x, b) as f64 - g;
                mean += g;
                se += d * d;
            }
        }
        mean /= npix;
        if mean == 0.0 {
            return Err(PfError::UndefinedMetric(format!(
                "ERGAS undefined: ground-truth band {b} has zero mean"
            )));
        }
        let rmse = (se / npix).sqrt();
        acc += (rmse / mean).powi(2);
    }
    Ok(100.0 * h_over_l * (acc / nb as f64).sqrt())
}

const LAPLACIAN8: [[f64; 3]; 3] = [[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]];

fn highpass(img: &RasterImage, band: usize) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, row) in LAPLACIAN8.iter().enumerate() {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for (kx, &k) in row.iter().enumerate() {
                    let ix = x as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    acc += k * img.get(iy as usize, ix as usize, band) as f64;
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va.sqrt() * vb.sqrt()))
    }
}

/// Spatial correlation coefficient: Pearson correlation of the
/// Laplacian-filtered images, averaged over bands.
pub fn scc(pred: &RasterImage, gt: &RasterImage) -> Result<f64> {
    check_same_shape(pred, gt)?;
    if pred.width < 3 || pred.height < 3 {
        return Err(PfError::Param(format!(
            "image {}x{} too small for the 3x3 high-pass filter",
            pred.width, pred.height
        )));
    }
    let mut acc = 0.0;
    for b in 0..pred.bands {
        let fp = highpass(pred, b);
        let fg = highpass(gt, b);
        match pearson(&fp, &fg) {
            Some(r) => acc += r,
            None => {
                return Err(PfError::UndefinedMetric(format!(
                    "SCC undefined: filtered band {b} has zero variance"
                )))
            }
        }
    }
    Ok(acc / pred.bands as f64)
}

/// Amplified absolute residual, clamped to the white level, for
/// visualization of disagreement structure.
pub fn residual_image(pred: &RasterImage, gt: &RasterImage, gain: f64) -> Result<RasterImage> {
    check_same_shape(pred, gt)?;
    let l = gt.max_value() as f64;
    let samples = pred
        .samples
        .iter()
        .zip(&gt.samples)
        .map(|(&a, &b)| (gain * (a as f64 - b as f64).abs()).round().min(l) as u16)
        .collect();
    RasterImage::new(pred.width, pred.height, pred.bands, pred.bit_depth, samples)
}

// ---------------------------------------------------------------------------
// Dataset evaluation
// ---------------------------------------------------------------------------

mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum V {
            Num(f64),
            Str(String),
        }
        Ok(match V::deserialize(d)? {
            V::Num(x) => x,
            V::Str(s) => {
                if s == "inf" {
                    f64::INFINITY
                } else {
                    return Err(serde::de::Error::custom(format!("bad PSNR value {s:?}")));
                }
            }
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    pub ssim: f64,
    pub ergas: f64,
    pub scc: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub ergas: f64,
    pub scc: f64,
    /// Images with infinite PSNR, excluded from the PSNR mean.
    pub psnr_inf_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UndefinedCase {
    pub name: String,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub means: MeanMetrics,
    pub undefined_cases: Vec<UndefinedCase>,
    pub image_count: usize,
    pub scc_filter: String,
}

impl MetricsReport {
    /// Aggregate per-image records into dataset means.
    pub fn from_images(images: Vec<ImageMetrics>, undefined_cases: Vec<UndefinedCase>) -> Self {
        let mut means = MeanMetrics::default();
        let n = images.len();
        let finite_psnr: Vec<f64> =
            images.iter().map(|m| m.psnr).filter(|p| p.is_finite()).collect();
        means.psnr_inf_count = n - finite_psnr.len();
        if !finite_psnr.is_empty() {
            means.psnr = finite_psnr.iter().sum::<f64>() / finite_psnr.len() as f64;
        } else if means.psnr_inf_count > 0 {
            means.psnr = f64::INFINITY;
        }
        if n > 0 {
            means.ssim = images.iter().map(|m| m.ssim).sum::<f64>() / n as f64;
            means.ergas = images.iter().map(|m| m.ergas).sum::<f64>() / n as f64;
            means.scc = images.iter().map(|m| m.scc).sum::<f64>() / n as f64;
        }
        MetricsReport {
            image_count: n,
            images,
            means,
            undefined_cases,
            scc_filter: "laplacian8".into(),
        }
    }

    /// Aligned text table in PSNR, SSIM, ERGAS, SCC column order.
    pub fn table(&self) -> String {
        fn fmt_psnr(v: f64) -> String {
            if v.is_infinite() {
                "inf".into()
            } else {
                format!("{v:.4}")
            }
        }
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>10} {:>8} {:>8} {:>8}\n",
            "Image", "PSNR", "SSIM", "ERGAS", "SCC"
        ));
        for m in &self.images {
            out.push_str(&format!(
                "{:<24} {:>10} {:>8.4} {:>8.4} {:>8.4}\n",
                m.name,
                fmt_psnr(m.psnr),
                m.ssim,
                m.ergas,
                m.scc
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>10} {:>8.4} {:>8.4} {:>8.4}\n",
            "mean",
            fmt_psnr(self.means.psnr),
            self.means.ssim,
            self.means.ergas,
            self.means.scc
        ));
        if self.means.psnr_inf_count > 0 {
            out.push_str(&format!(
                "note: {} image(s) with infinite PSNR excluded from the PSNR mean\n",
                self.means.psnr_inf_count
            ));
        }
        out
    }
}

/// Name stem of a manifest entry, derived from its ground-truth file.
pub fn entry_stem(gt_path: &str) -> String {
    let name = Path::new(gt_path)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| gt_path.to_string());
    name.strip_suffix(".gt.pfr").unwrap_or(&name).to_string()
}

/// Compute all four metrics for every manifest entry against the
/// prediction rasters in `pred_dir` (named `<stem>.pred.pfr`).
pub fn evaluate(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    pred_dir: &Path,
) -> Result<MetricsReport> {
    let missing: Vec<String> = manifest
        .entries
        .iter()
        .map(|e| format!("{}.pred.pfr", entry_stem(&e.gt)))
        .filter(|n| !pred_dir.join(n).exists())
        .collect();
    if !missing.is_empty() {
        return Err(PfError::Missing(missing));
    }

    let mut images = Vec::new();
    let mut undefined = Vec::new();
    for e in &manifest.entries {
        let stem = entry_stem(&e.gt);
        let gt = read_pfr(manifest_dir.join(&e.gt))?;
        let pred = read_pfr(pred_dir.join(format!("{stem}.pred.pfr")))?;
        let p = psnr(&pred, &gt)?;
        let s = ssim(&pred, &gt)?;
        let ergas_v = match ergas(&pred, &gt, 0.25) {
            Ok(v) => v,
            Err(PfError::UndefinedMetric(d)) => {
                undefined.push(UndefinedCase { name: stem.clone(), detail: d });
                continue;
            }
            Err(e) => return Err(e),
        };
        let scc_v = match scc(&pred, &gt) {
            Ok(v) => v,
            Err(PfError::UndefinedMetric(d)) => {
                undefined.push(UndefinedCase { name: stem.clone(), detail: d });
                continue;
            }
            Err(e) => return Err(e),
        };
        images.push(ImageMetrics { name: stem, psnr: p, ssim: s, ergas: ergas_v, scc: scc_v });
    }
    Ok(MetricsReport::from_images(images, undefined))
}
