//! Scalar abstraction for the tensor core.
//!
//! Everything numeric in the tensor/tape/model layers is generic over a
//! floating-point scalar. Training, analysis and the CLI pin `f64` through
//! the crate-root aliases; `f32` is exercised at the serialization boundary
//! and available for low-precision experiments.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Floating-point scalar usable by the tensor engine.
pub trait Scalar: Float + Debug + Display + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_f32(v: f32) -> Self {
        Self::from_f64(v as f64)
    }
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}
