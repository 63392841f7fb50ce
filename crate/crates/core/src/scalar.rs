//! Floating-point element type shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type of tensors: `f32` for training runs, `f64` for gradient oracles.
pub trait Scalar:
    Float
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
    /// Short precision tag used in configs and diagnostics.
    const NAME: &'static str;

    fn erf(self) -> Self;

    /// `c ← a·b + beta·c` over strided `m×k` and `k×n` operands.
    ///
    /// # Safety
    /// Every element addressed through the dimensions and strides must lie
    /// inside its buffer, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        a_strides: (isize, isize),
        b: *const Self,
        b_strides: (isize, isize),
        beta: Self,
        c: *mut Self,
        c_strides: (isize, isize),
    );

    /// Lossy conversion from `f64`, used for constants.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Standard normal CDF.
    fn normal_cdf(self) -> Self {
        let half = Self::c(0.5);
        half * (Self::one() + (self * Self::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
    }

    /// Standard normal density.
    fn normal_pdf(self) -> Self {
        let inv_sqrt_2pi = Self::c(0.398_942_280_401_432_7);
        inv_sqrt_2pi * (-(self * self) * Self::c(0.5)).exp()
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        (rsa, csa): (isize, isize),
        b: *const Self,
        (rsb, csb): (isize, isize),
        beta: Self,
        c: *mut Self,
        (rsc, csc): (isize, isize),
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        (rsa, csa): (isize, isize),
        b: *const Self,
        (rsb, csb): (isize, isize),
        beta: Self,
        c: *mut Self,
        (rsc, csc): (isize, isize),
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Run-time precision switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
#[derive(Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}
