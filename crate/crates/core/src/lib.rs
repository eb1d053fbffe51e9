//! Source-free semi-supervised domain adaptation with probability-space
//! contrastive objectives, patch-level mixup and early-learning regularisation.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod augment;
pub mod autograd;
pub mod backbone;
pub mod batching;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision model used for training runs.
pub type Model = backbone::VisionTransformer<f32>;
pub type ModelF64 = backbone::VisionTransformer<f64>;
pub type Split = data::DatasetSplit<f32>;
pub type SplitF64 = data::DatasetSplit<f64>;
pub type ModelCheckpoint = checkpoint::Checkpoint<f32>;
pub type ProbMatrixF64 = losses::ProbMatrix<f64>;
