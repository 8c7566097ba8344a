//! Floating point abstraction shared by the numeric modules.

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Real scalar the numeric core is generic over: `f32` or `f64`.
pub trait Scalar: NdFloat + FromPrimitive + std::iter::Sum + Default {
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn of(value: f64) -> Self {
        <Self as FromPrimitive>::from_f64(value).expect("f64 literal representable")
    }

    /// Widens to `f64`.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Smallest magnitude treated as a nonzero weight.
    fn tiny() -> Self;
}

impl Scalar for f32 {
    fn tiny() -> Self {
        1e-30
    }
}

impl Scalar for f64 {
    fn tiny() -> Self {
        1e-300
    }
}

#[inline]
pub(crate) fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}
