//! Scalar abstraction: the dense kernel is generic over the element type.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Floating-point element type of the dense kernel (f32 or f64).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Convert an f64 literal; panics only for non-representable values,
    /// which cannot happen for the finite constants used here.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
