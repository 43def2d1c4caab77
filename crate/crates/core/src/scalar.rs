//! Scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real floating point type usable throughout the crate: `f32` or `f64`.
///
/// The bound combines `num_traits::Float` (elementwise math) with faer's
/// `RealField` (dense factorizations). faer's methods carry an `_impl`
/// suffix so the two never collide at call sites.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + faer::traits::RealField
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal. Never fails for the supported types.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}
