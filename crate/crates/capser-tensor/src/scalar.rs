//! Floating-point scalar abstraction for the tensor machinery.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type usable by [`crate::Tensor`] and [`crate::Tape`].
///
/// Implemented for `f32` and `f64`. The two conversion methods exist so the
/// numeric code can mix literal constants (always written as `f64`) into
/// generic arithmetic without going through `Option`-returning casts.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}
