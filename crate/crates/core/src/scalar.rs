use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar the numerics are generic over: `f32` or `f64`.
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
    /// Converts an `f64` literal, rounding to nearest for narrower types.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal is representable")
    }

    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn norm_sq<S: Scalar>(x: &[S]) -> S {
    x.iter().fold(S::zero(), |acc, &v| acc + v * v)
}

pub(crate) fn norm<S: Scalar>(x: &[S]) -> S {
    norm_sq(x).sqrt()
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `|x|^k` with the convention `|x|^0 = 1`, including at `x = 0`.
pub(crate) fn pow_norm<S: Scalar>(x: &[S], k: S) -> S {
    if k == S::zero() {
        S::one()
    } else if k == S::lit(2.0) {
        norm_sq(x)
    } else if k == S::one() {
        norm(x)
    } else {
        norm(x).powf(k)
    }
}

/// `out = a * v` for a row-major `rows x cols` matrix.
pub(crate) fn mat_vec<S: Scalar>(a: &[S], rows: usize, cols: usize, v: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&a[r * cols..(r + 1) * cols], v);
    }
}
