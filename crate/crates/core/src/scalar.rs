//! Scalar abstraction for the numeric kernel.
//!
//! Everything in the tensor/SSM layer is generic over [`Scalar`] so the same
//! kernels instantiate at `f32` or `f64`. The pipeline itself runs in `f64`
//! (see the type aliases at the crate root): gradient checks and the oracle
//! tolerances in the test suite assume 64-bit arithmetic.

use num_traits::{Float, NumAssign};

pub trait Scalar:
    Float + NumAssign + std::fmt::Debug + std::fmt::Display + Default + 'static
{
    /// Lossy conversion from `f64`; literals in generic code go through this.
    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}
