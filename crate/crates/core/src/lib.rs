//! Indoor volumetric reconstruction library.
//!
//! The numeric kernel (tensors, autodiff, state-space scans) is generic over
//! the scalar type; the pipeline runs on the `f64` aliases exported below.

pub mod error;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Pipeline-default dense tensor (64-bit).
pub type Tensor = tensor::TensorBase<f64>;
/// Pipeline-default gradient tape (64-bit).
pub type Tape = tensor::TapeBase<f64>;
/// Single-precision tensor, for callers that trade accuracy for footprint.
pub type Tensor32 = tensor::TensorBase<f32>;
pub type Tape32 = tensor::TapeBase<f32>;
