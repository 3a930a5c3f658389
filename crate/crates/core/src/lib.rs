//! Wavelet-domain knowledge distillation for small-object detectors.
//!
//! The crate bundles a tiny `f64` tensor type, 2-D discrete wavelet
//! transforms, detection-informed spatial weighting, a two-level
//! anchor-free detector trained on synthetic scenes, and the explicit and
//! implicit spectral distillation losses that tie a student to a frozen
//! teacher.

pub mod checkpoint;
pub mod detector;
pub mod distill;
pub mod disw;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod numcheck;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use parallel::Execution;
pub use tensor::Tensor;
