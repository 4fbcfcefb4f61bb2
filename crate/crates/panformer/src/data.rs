//! Reduced-resolution (Wald protocol) dataset synthesis, raster I/O with
//! raw bit depth, and patch extraction.
//!
//! Rasters are unsigned 16-bit integer images carrying an explicit sensor
//! bit depth (10 or 11 for the satellite-like profiles, up to 16). The PFR
//! container is a little-endian binary format with a fixed header followed
//! by row-major, band-interleaved-by-pixel samples.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{PfError, Result};

pub const PFR_MAGIC: &[u8; 4] = b"PFR1";

/// Integer multispectral or panchromatic raster with explicit bit depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub bit_depth: u16,
    /// Row-major, band-interleaved-by-pixel.
    pub samples: Vec<u16>,
}

impl RasterImage {
    pub fn new(
        width: usize,
        height: usize,
        bands: usize,
        bit_depth: u16,
        samples: Vec<u16>,
    ) -> Result<Self> {
        if bit_depth == 0 || bit_depth > 16 {
            return Err(PfError::Param(format!("bit depth {bit_depth} out of range 1..=16")));
        }
        if samples.len() != width * height * bands {
            return Err(PfError::Dim(format!(
                "sample count {} != {width}x{height}x{bands}",
                samples.len()
            )));
        }
        let max = Self::max_value_for(bit_depth);
        if let Some(s) = samples.iter().find(|&&s| s > max) {
            return Err(PfError::Param(format!(
                "sample {s} exceeds bit depth {bit_depth} (max {max})"
            )));
        }
        Ok(RasterImage { width, height, bands, bit_depth, samples })
    }

    pub fn zeros(width: usize, height: usize, bands: usize, bit_depth: u16) -> Self {
        RasterImage {
            width,
            height,
            bands,
            bit_depth,
            samples: vec![0; width * height * bands],
        }
    }

    fn max_value_for(bit_depth: u16) -> u16 {
        if bit_depth == 16 {
            u16::MAX
        } else {
            (1u16 << bit_depth) - 1
        }
    }

    /// 2^bit_depth - 1, the white level L.
    pub fn max_value(&self) -> u16 {
        Self::max_value_for(self.bit_depth)
    }

    pub fn get(&self, y: usize, x: usize, b: usize) -> u16 {
        self.samples[(y * self.width + x) * self.bands + b]
    }

    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<RasterImage> {
        if y + h > self.height || x + w > self.width {
            return Err(PfError::Param(format!(
                "crop ({y},{x})+{h}x{w} exceeds raster {}x{}",
                self.height, self.width
            )));
        }
        let mut samples = Vec::with_capacity(h * w * self.bands);
        for yy in y..y + h {
            let row = &self.samples[(yy * self.width + x) * self.bands..][..w * self.bands];
            samples.extend_from_slice(row);
        }
        RasterImage::new(w, h, self.bands, self.bit_depth, samples)
    }
}

/// Aligned (PAN, LR MS, GT MS) triple; spatial ratio is exactly 4.
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub pan: RasterImage,
    pub lrms: RasterImage,
    pub gt: RasterImage,
}

impl PatchPair {
    pub fn new(pan: RasterImage, lrms: RasterImage, gt: RasterImage) -> Result<Self> {
        if pan.bands != 1 {
            return Err(PfError::Param(format!("PAN patch must be 1-band, got {}", pan.bands)));
        }
        if pan.width != 4 * lrms.width
            || pan.height != 4 * lrms.height
            || gt.width != pan.width
            || gt.height != pan.height
            || gt.bands != lrms.bands
        {
            return Err(PfError::Dim(format!(
                "patch ratio violated: pan {}x{}, lrms {}x{}x{}, gt {}x{}x{}",
                pan.width, pan.height, lrms.width, lrms.height, lrms.bands, gt.width, gt.height,
                gt.bands
            )));
        }
        if pan.bit_depth != lrms.bit_depth || pan.bit_depth != gt.bit_depth {
            return Err(PfError::Param("bit depth differs across patch rasters".into()));
        }
        Ok(PatchPair { pan, lrms, gt })
    }
}

// ---------------------------------------------------------------------------
// Degradation pipeline
// ---------------------------------------------------------------------------

fn reflect(i: isize, n: isize) -> usize {
    // reflect-101: ...cba|abc...|cba...
    let mut i = i;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Normalized Gaussian taps with radius ceil(3·sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur with reflect padding, per band, rounded and
/// clamped back to the raster's bit depth.
pub fn gaussian_blur(img: &RasterImage, sigma: f64) -> Result<RasterImage> {
    if sigma <= 0.0 {
        return Err(PfError::Param(format!("sigma must be positive, got {sigma}")));
    }
    let taps = gaussian_kernel(sigma);
    let radius = taps.len() / 2;
    let (w, h, nb) = (img.width, img.height, img.bands);
    let mut tmp = vec![0.0f64; w * h * nb];
    // horizontal
    for y in 0..h {
        for x in 0..w {
            for b in 0..nb {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - radius as isize, w as isize);
                    acc += t * img.get(y, sx, b) as f64;
                }
                tmp[(y * w + x) * nb + b] = acc;
            }
        }
    }
    // vertical
    let max = img.max_value() as f64;
    let mut out = vec![0u16; w * h * nb];
    for y in 0..h {
        for x in 0..w {
            for b in 0..nb {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - radius as isize, h as isize);
                    acc += t * tmp[(sy * w + x) * nb + b];
                }
                out[(y * w + x) * nb + b] = acc.round().clamp(0.0, max) as u16;
            }
        }
    }
    RasterImage::new(w, h, nb, img.bit_depth, out)
}

/// Keep samples at spatial indices ≡ 0 (mod factor), offset 0.
pub fn decimate(img: &RasterImage, factor: usize) -> Result<RasterImage> {
    if factor == 0 || img.width % factor != 0 || img.height % factor != 0 {
        return Err(PfError::Param(format!(
            "decimation factor {factor} does not divide {}x{}",
            img.width, img.height
        )));
    }
    let (w, h, nb) = (img.width / factor, img.height / factor, img.bands);
    let mut samples = Vec::with_capacity(w * h * nb);
    for y in 0..h {
        for x in 0..w {
            for b in 0..nb {
                samples.push(img.get(y * factor, x * factor, b));
            }
        }
    }
    RasterImage::new(w, h, nb, img.bit_depth, samples)
}

/// Wald's protocol: blur + 4x decimate both inputs; the original MS is the
/// ground truth.
pub fn degrade_wald(
    pan: &RasterImage,
    ms: &RasterImage,
    sigma: f64,
) -> Result<(RasterImage, RasterImage, RasterImage)> {
    if pan.width != 4 * ms.width || pan.height != 4 * ms.height {
        return Err(PfError::Param(format!(
            "PAN {}x{} must be 4x the MS {}x{}",
            pan.width, pan.height, ms.width, ms.height
        )));
    }
    let lr_pan = decimate(&gaussian_blur(pan, sigma)?, 4)?;
    let lr_ms = decimate(&gaussian_blur(ms, sigma)?, 4)?;
    Ok((lr_pan, lr_ms, ms.clone()))
}

/// Patch extraction mode.
#[derive(Clone, Copy, Debug)]
pub enum CropMode {
    /// Reproducible uniform crops.
    Random { count: usize, seed: u64 },
    /// Tiling with the given stride (in MS grid units); a final tile snaps
    /// to each edge so coverage is complete, overlapping its neighbor.
    Ordered { stride: usize },
}

fn ordered_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut pos = Vec::new();
    let mut p = 0;
    while p + patch <= extent {
        pos.push(p);
        p += stride;
    }
    if let Some(&last) = pos.last() {
        if last + patch < extent {
            pos.push(extent - patch);
        }
    }
    pos
}

/// Cut aligned PatchPairs: a PAN/GT crop at (4y, 4x) of `size` pairs with an
/// MS crop at (y, x) of `size/4`.
pub fn crop_patches(
    lr_pan: &RasterImage,
    lr_ms: &RasterImage,
    gt: &RasterImage,
    size: usize,
    mode: CropMode,
) -> Result<Vec<PatchPair>> {
    if size % 4 != 0 || size == 0 {
        return Err(PfError::Param(format!("patch size {size} must be a positive multiple of 4")));
    }
    let m = size / 4;
    if m > lr_ms.width || m > lr_ms.height {
        return Err(PfError::Param(format!(
            "patch size {size} too large for MS grid {}x{}",
            lr_ms.width, lr_ms.height
        )));
    }
    if lr_pan.width != 4 * lr_ms.width || lr_pan.height != 4 * lr_ms.height {
        return Err(PfError::Param("lr_pan must be 4x lr_ms".into()));
    }
    let cut = |y: usize, x: usize| -> Result<PatchPair> {
        PatchPair::new(
            lr_pan.crop(4 * y, 4 * x, size, size)?,
            lr_ms.crop(y, x, m, m)?,
            gt.crop(4 * y, 4 * x, size, size)?,
        )
    };
    let mut out = Vec::new();
    match mode {
        CropMode::Ordered { stride } => {
            if stride == 0 {
                return Err(PfError::Param("stride must be positive".into()));
            }
            for y in ordered_positions(lr_ms.height, m, stride) {
                for x in ordered_positions(lr_ms.width, m, stride) {
                    out.push(cut(y, x)?);
                }
            }
        }
        CropMode::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..count {
                let y = rng.gen_range(0..=lr_ms.height - m);
                let x = rng.gen_range(0..=lr_ms.width - m);
                out.push(cut(y, x)?);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PFR container
// ---------------------------------------------------------------------------

/// Serialize a raster to the PFR byte layout.
pub fn pfr_bytes(img: &RasterImage) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + img.samples.len() * 2);
    buf.extend_from_slice(PFR_MAGIC);
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    buf.extend_from_slice(&(img.bands as u16).to_le_bytes());
    buf.extend_from_slice(&img.bit_depth.to_le_bytes());
    for s in &img.samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf
}

/// Parse a raster from PFR bytes, validating magic, length, and bit depth.
pub fn pfr_from_bytes(bytes: &[u8]) -> Result<RasterImage> {
    if bytes.len() < 16 {
        return Err(PfError::parse("PFR", format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != PFR_MAGIC {
        return Err(PfError::parse(
            "PFR",
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])),
        ));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let bands = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
    let bit_depth = u16::from_le_bytes(bytes[14..16].try_into().unwrap());
    let count = width * height * bands;
    let payload = &bytes[16..];
    if payload.len() != count * 2 {
        return Err(PfError::parse(
            "PFR",
            format!("payload {} bytes, expected {}", payload.len(), count * 2),
        ));
    }
    let samples: Vec<u16> = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    RasterImage::new(width, height, bands, bit_depth, samples)
        .map_err(|e| PfError::parse("PFR", e.to_string()))
}

pub fn write_pfr(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&pfr_bytes(img))?;
    Ok(())
}

pub fn read_pfr(path: impl AsRef<Path>) -> Result<RasterImage> {
    let mut buf = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
    pfr_from_bytes(&buf)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Divide by 2^bit_depth - 1 into [0,1]; returns an `[H,W,bands]` tensor.
pub fn normalize(img: &RasterImage) -> Tensor {
    let l = img.max_value() as f64;
    let data = img.samples.iter().map(|&s| s as f64 / l).collect();
    Tensor::new(vec![img.height, img.width, img.bands], data).unwrap()
}

/// Multiply by 2^bit_depth - 1, round half away from zero, clamp.
pub fn denormalize(t: &Tensor, bit_depth: u16) -> Result<RasterImage> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(PfError::Dim(format!("denormalize expects [H,W,B], got {s:?}")));
    }
    let l = RasterImage::max_value_for(bit_depth) as f64;
    let samples = t
        .data()
        .iter()
        .map(|&v| (v * l).round().clamp(0.0, l) as u16)
        .collect();
    RasterImage::new(s[1], s[0], s[2], bit_depth, samples)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pan: String,
    pub lrms: String,
    pub gt: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: String,
    pub satellite: String,
    pub bit_depth: u16,
    pub bands: usize,
    pub sigma: f64,
    pub decimate_offset: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(f)?)
    }

    /// Load the patch triple of one entry, resolving paths against `base`.
    pub fn load_pair(&self, base: &Path, entry: &ManifestEntry) -> Result<PatchPair> {
        PatchPair::new(
            read_pfr(base.join(&entry.pan))?,
            read_pfr(base.join(&entry.lrms))?,
            read_pfr(base.join(&entry.gt))?,
        )
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Seeded synthetic acquisition: band-correlated Gaussian blobs plus sharp
/// rectangles, rendered at PAN resolution; the MS bands are 4×4 block
/// means and the PAN is the band average at full resolution.
pub fn synth_scene(
    seed: u64,
    ms_size: usize,
    bands: usize,
    bit_depth: u16,
) -> (RasterImage, RasterImage) {
    let p = ms_size * 4;
    let l = RasterImage::max_value_for(bit_depth) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![0.0f64; p * p * bands];

    // correlated blobs: shared geometry, per-band amplitude
    let blobs = 10 + bands;
    for _ in 0..blobs {
        let cy = rng.gen_range(0.0..p as f64);
        let cx = rng.gen_range(0.0..p as f64);
        let sg = rng.gen_range(p as f64 / 40.0..p as f64 / 8.0);
        let base = rng.gen_range(0.1..0.45) * l;
        let amps: Vec<f64> = (0..bands).map(|_| base * rng.gen_range(0.6..1.4)).collect();
        for y in 0..p {
            for x in 0..p {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let g = (-d2 / (2.0 * sg * sg)).exp();
                if g > 1e-4 {
                    for (b, a) in amps.iter().enumerate() {
                        field[(y * p + x) * bands + b] += a * g;
                    }
                }
            }
        }
    }
    // sharp-edged rectangles
    for _ in 0..6 {
        let y0 = rng.gen_range(0..p / 2);
        let x0 = rng.gen_range(0..p / 2);
        let h = rng.gen_range(p / 16..p / 3);
        let w = rng.gen_range(p / 16..p / 3);
        let base = rng.gen_range(0.05..0.3) * l;
        let amps: Vec<f64> = (0..bands).map(|_| base * rng.gen_range(0.7..1.3)).collect();
        for y in y0..(y0 + h).min(p) {
            for x in x0..(x0 + w).min(p) {
                for (b, a) in amps.iter().enumerate() {
                    field[(y * p + x) * bands + b] += a;
                }
            }
        }
    }
    // floor offset so band means stay well away from zero
    for v in &mut field {
        *v += 0.1 * l;
    }

    let quant = |v: f64| v.round().clamp(0.0, l) as u16;
    let pan: Vec<u16> = (0..p * p)
        .map(|i| {
            let s: f64 = (0..bands).map(|b| field[i * bands + b]).sum();
            quant(s / bands as f64)
        })
        .collect();
    let mut ms = vec![0u16; ms_size * ms_size * bands];
    for y in 0..ms_size {
        for x in 0..ms_size {
            for b in 0..bands {
                let mut s = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        s += field[((y * 4 + dy) * p + x * 4 + dx) * bands + b];
                    }
                }
                ms[(y * ms_size + x) * bands + b] = quant(s / 16.0);
            }
        }
    }
    (
        RasterImage::new(p, p, 1, bit_depth, pan).unwrap(),
        RasterImage::new(ms_size, ms_size, bands, bit_depth, ms).unwrap(),
    )
}
