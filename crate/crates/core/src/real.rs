//! Scalar abstraction shared by the numerical core.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar the hazard, quadrature, metric and loss code is
/// written against. Implemented for `f32` and `f64`.
pub trait Real:
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
    /// Lossy conversion from an `f64` literal or precomputed constant.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Real")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn two() -> Self {
        Self::lit(2.0)
    }

    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }

    /// Replaces every element by its exponential.
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }

    /// `Σ_i a[i] · exp(−c · d[i])` over the common length, summed in a fixed
    /// order that does not depend on the host CPU.
    fn weighted_exp_sum(a: &[Self], d: &[Self], c: Self) -> Self {
        let mut acc = Self::zero();
        for (x, y) in a.iter().zip(d) {
            acc += *x * (-c * *y).exp();
        }
        acc
    }
}

impl Real for f32 {}

impl Real for f64 {
    fn exp_in_place(xs: &mut [f64]) {
        crate::fastexp::exp_in_place(xs)
    }

    fn weighted_exp_sum(a: &[f64], d: &[f64], c: f64) -> f64 {
        crate::fastexp::weighted_exp_sum(a, d, c)
    }
}
