//! Scalar abstraction shared by the numeric modules.
//!
//! Estimators, surrogate terms and Pass@k metrics are written against
//! [`Scalar`] so they run unchanged on `f32` and `f64`. The tabular policy and
//! the trainer are fixed to `f64` (see the aliases at the crate root).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by every generic routine in this crate.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable in scalar type")
    }

    /// Conversion from a count.
    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Sum
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Absolute tolerance used when comparing non-binary rewards for equality.
pub const REWARD_EQ_TOL: f64 = 1e-12;

/// Reward equality: exact for binary rewards, `1e-12` absolute otherwise.
#[inline]
pub fn reward_eq<S: Scalar>(a: S, b: S) -> bool {
    a == b || (a - b).abs() <= S::lit(REWARD_EQ_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_eq_tolerates_round_trip_noise() {
        assert!(reward_eq(1.0_f64, 1.0));
        assert!(reward_eq(0.5_f64, 0.5 + 1e-13));
        assert!(!reward_eq(0.5_f64, 0.5 + 1e-9));
        assert!(reward_eq(1.0_f32, 1.0));
    }

    #[test]
    fn literal_conversion() {
        assert_eq!(f32::lit(0.25), 0.25_f32);
        assert_eq!(f64::from_count(7), 7.0);
    }
}
