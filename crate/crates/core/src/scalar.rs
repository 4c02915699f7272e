//! Scalar abstraction shared by every numerical kernel.
//!
//! All solvers are written against [`Real`] so that the same code runs in
//! `f64` (the default, see the aliases in the crate root) or `f32` for quick
//! low-precision sweeps.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point type usable by the solvers.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or parameter.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `a^n` by square-and-multiply, the same sequence as the compiler runtime.
#[inline]
pub fn powi<F: Real>(a: F, n: i32) -> F {
    let mut k = n.unsigned_abs();
    let (mut base, mut r) = (a, F::one());
    loop {
        if k & 1 == 1 {
            r = r * base;
        }
        k >>= 1;
        if k == 0 {
            break;
        }
        base = base * base;
    }
    if n < 0 {
        F::one() / r
    } else {
        r
    }
}

/// Euclidean squared norm, summed left to right.
#[inline]
pub fn norm_sq<F: Real>(x: &[F]) -> F {
    x.iter().fold(F::zero(), |acc, &xi| acc + xi * xi)
}

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&ai, &bi)| acc + ai * bi)
}
