//! Scalar abstraction shared by every numeric kernel in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real floating-point scalar: `f32` or `f64`.
///
/// Verification paths run in `f64`; the benchmark path may use `f32`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless for `f64`, rounding for `f32`.
    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Short name used in logs and CLI output.
    const NAME: &'static str;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    const NAME: &'static str = "f64";
}

/// Shorthand for converting literals inside generic code.
#[inline]
pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}
