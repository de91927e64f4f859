//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point element type: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for finite inputs.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Round to nearest, ties to even.
    fn round_half_even(self) -> Self;

    /// [`Scalar::round_half_even`] for `|self| < 2^22`, via the
    /// add-and-subtract of `1.5 * 2^mantissa_bits`.
    fn round_half_even_small(self) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }

    #[inline]
    fn round_half_even_small(self) -> Self {
        const M: f32 = 12_582_912.0;
        (self + M) - M
    }
}

impl Scalar for f64 {
    #[inline]
    fn round_half_even(self) -> Self {
        self.round_ties_even()
    }

    #[inline]
    fn round_half_even_small(self) -> Self {
        const M: f64 = 6_755_399_441_055_744.0;
        (self + M) - M
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_even() {
        assert_eq!(2.5f64.round_half_even(), 2.0);
        assert_eq!(3.5f64.round_half_even(), 4.0);
        assert_eq!((-2.5f32).round_half_even(), -2.0);
        assert_eq!(31.5f64.round_half_even(), 32.0);
    }

    proptest::proptest! {
        #[test]
        fn small_rounding_matches(x in -4_000_000.0f64..4_000_000.0, k in -2000i32..2000) {
            let tie = k as f64 + 0.5;
            for v in [x, tie, x / 1000.0] {
                proptest::prop_assert_eq!(v.round_half_even_small(), v.round_half_even() + 0.0);
                let f = v as f32;
                proptest::prop_assert_eq!(f.round_half_even_small(), f.round_half_even() + 0.0);
            }
        }
    }
}
