//! Element type abstraction: f32 for training speed, f64 for verification.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element of tensors and model parameters.
///
/// The whole pipeline is generic over this trait so the same code runs at
/// 32-bit precision for training and 64-bit for gradient verification and
/// oracle comparisons.
pub trait Scalar:
    Float
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
    const BITS: u32;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Error function, for the exact-erf GELU.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn erf(self) -> Self {
        // Evaluated in f64: erff loses ~3 ulp near the tails and the cast
        // costs nothing next to the surrounding kernel work.
        libm::erf(self as f64) as f32
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}
