use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element types the numeric kernels accept: `f32` or `f64`.
///
/// Reductions never accumulate in `Self` directly; they run in the wider
/// [`Scalar::Acc`] type and round once at the end. For `f32` data this gives
/// 64-bit accumulation, which keeps oracle comparisons tight.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Accumulator used for dot products, softmax, and loss sums.
    type Acc: Float + AddAssign + Debug;

    fn acc(self) -> Self::Acc;
    fn from_acc(acc: Self::Acc) -> Self;
    fn acc_from_f64(x: f64) -> Self::Acc;
    fn acc_to_f64(acc: Self::Acc) -> f64;
}

impl Scalar for f32 {
    type Acc = f64;

    #[inline]
    fn acc(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_acc(acc: f64) -> f32 {
        acc as f32
    }
    #[inline]
    fn acc_from_f64(x: f64) -> f64 {
        x
    }
    #[inline]
    fn acc_to_f64(acc: f64) -> f64 {
        acc
    }
}

impl Scalar for f64 {
    type Acc = f64;

    #[inline]
    fn acc(self) -> f64 {
        self
    }
    #[inline]
    fn from_acc(acc: f64) -> f64 {
        acc
    }
    #[inline]
    fn acc_from_f64(x: f64) -> f64 {
        x
    }
    #[inline]
    fn acc_to_f64(acc: f64) -> f64 {
        acc
    }
}
