//! PanFormer: transformer-based pan-sharpening.
//!
//! A two-stream windowed-attention encoder extracts modality-specific
//! features from a panchromatic image and a low-resolution multispectral
//! image; a cross-attention fusion module merges them; a convolutional
//! restoration head with pixel-shuffle upsampling produces the
//! high-resolution multispectral output. The crate also ships the
//! reduced-resolution (Wald protocol) data pipeline, the PSNR/SSIM/ERGAS/SCC
//! evaluation suite, and a deterministic training loop with checkpointing.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{PfError, Result};
