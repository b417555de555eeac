//! Scalar abstraction for the numeric core.
//!
//! Everything downstream of case ingestion is generic over [`Scalar`] so the
//! whole pipeline can run in `f32` or `f64`; the concrete aliases at the crate
//! root pin `f64`, which is what the CLI uses.

use nalgebra::RealField;

/// Floating-point scalar the numeric core is generic over.
pub trait Scalar: RealField + Copy + Default + std::fmt::Display + std::fmt::LowerExp {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into the working scalar type.
#[inline]
pub fn num<T: Scalar>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Converts a count into the working scalar type.
#[inline]
pub fn num_usize<T: Scalar>(n: usize) -> T {
    nalgebra::convert(n as f64)
}

/// Converts the working scalar back to `f64` (for diagnostics and reports).
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    nalgebra::try_convert(x).unwrap_or(f64::NAN)
}

/// `true` when the value is neither NaN nor infinite.
#[inline]
pub fn is_finite<T: Scalar>(x: T) -> bool {
    // NaN fails the self-comparison, infinities fail the bound check.
    x == x && x.abs() <= T::max_value().unwrap_or_else(T::one)
}
