//! Floating-point scalar abstraction.
//!
//! Everything numeric is generic over [`Scalar`] so the same code runs in
//! `f32` for speed and in `f64` for gradient checks and reference runs.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type of tensors, parameters, and losses.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Shorthand for converting an `f64` literal.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    /// Lossy view as `f64`, for logging and reports.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
