//! Scalar abstraction so the numeric core runs in f32 for training and in
//! f64 for finite-difference gradient checks.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, Signed};
use rustfft::FftNum;

/// Element type of all tensors in the numeric core. Implemented for f32
/// (the production precision; matches the on-disk formats) and f64
/// (used by gradient-check tests). The conversion methods carry names that
/// do not collide with the `num-traits` supertraits.
pub trait Real:
    Float
    + Signed
    + ScalarOperand
    + LinalgScalar
    + FftNum
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Convert from f64, rounding to nearest when narrowing.
    fn of(v: f64) -> Self;
    /// Widen to f64.
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}
