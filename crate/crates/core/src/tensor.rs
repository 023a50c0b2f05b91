//! Numeric scalar trait and small array helpers shared by the layers.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array4, ArrayView2, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the engine runs on. Training uses `f32`; gradient
/// checks run the same code in `f64`.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    #[inline]
    fn usize(v: usize) -> Self {
        Self::from_usize(v).expect("count representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `c = alpha * a · b + beta * c`, dispatched to the blocked GEMM kernels.
#[inline]
pub fn gemm<F: Real>(alpha: F, a: &ArrayView2<F>, b: &ArrayView2<F>, beta: F, c: &mut ArrayViewMut2<F>) {
    ndarray::linalg::general_mat_mul(alpha, a, b, beta, c);
}

pub fn all_finite<F: Real>(x: &Array4<F>) -> bool {
    x.iter().all(|v| v.is_finite())
}

pub fn cast4<A: Real, B: Real>(x: &Array4<A>) -> Array4<B> {
    x.mapv(|v| B::lit(v.as_f64()))
}
