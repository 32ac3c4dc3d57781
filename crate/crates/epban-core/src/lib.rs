//! Full-reference perceptual quality network for super-resolution.
//!
//! The crate bundles a small reverse-mode autodiff tensor engine, image
//! I/O and degradation operators, a differentiable SSIM, the
//! bi-directional axial cross-attention quality network, its training
//! pipelines, and the evaluation/ablation harness. Everything is CPU-only
//! and bitwise deterministic for a fixed seed; heavy loops fan out over
//! rayon when the `parallel` feature (default) is enabled.

pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod net;
pub mod scalar;
pub mod seed;
pub mod ssim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{DropoutMode, Tensor};
