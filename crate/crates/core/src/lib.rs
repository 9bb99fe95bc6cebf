//! Few-shot image generation with wavelet skip connections.
//!
//! Images are `(C, H, W)` tensors in `[-1, 1]`. The generator consumes
//! episodes of `K` images of one class and emits one new image per episode.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod generator;
pub mod losses;
pub mod nn;
mod ops;
pub mod train;
pub mod wavelet;

pub use candle_core::{DType, Tensor};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig, Variant};
pub use wavelet::{haar_decompose, haar_reconstruct, Band, BandMask, FrequencyBands};
