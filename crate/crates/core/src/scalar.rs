//! Scalar abstraction shared by the model, losses, and evaluation code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the numeric core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).expect("usize representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Probability floor applied inside every logarithm.
    #[inline]
    fn prob_floor() -> Self {
        Self::of(PROB_FLOOR)
    }

    /// `ln(max(p, floor))`.
    #[inline]
    fn safe_ln(self) -> Self {
        self.max(Self::prob_floor()).ln()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const PROB_FLOOR: f64 = 1e-12;
