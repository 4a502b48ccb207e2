//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate (tape, generators, language models,
//! metrics) is generic over [`Scalar`] so the same code runs in `f32` or
//! `f64`. The crate-root aliases pin `f64`, which is what training,
//! checkpoints and the gradient checks use.

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable in tensors and tapes.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for literals and RNG draws.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Lossy conversion to `f64`, for logging and reports.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
