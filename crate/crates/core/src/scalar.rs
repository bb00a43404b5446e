//! Scalar abstraction for the numerical core.
//!
//! The uncertainty and risk math is written once against [`Real`] and
//! instantiated for `f64` (the default everywhere) and `f32`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the numerical core: f32 or f64.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {}

impl<T> Real for T where T: RealField + Copy + FromPrimitive + ToPrimitive {}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("scalar cannot represent literal")
}

/// Widens a working scalar to `f64` for reporting.
#[inline]
pub fn wide<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
