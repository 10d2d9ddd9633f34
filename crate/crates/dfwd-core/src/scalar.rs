//! Floating-point abstraction over f32 (training default) and f64
//! (verification mode for finite-difference gradient checks).

use std::fmt::{Debug, Display};

/// The element type of every tensor in the crate. Implemented for f32 and
/// f64 only; the associated `gemm` hook dispatches to the matching
/// matrixmultiply kernel so generic code gets the fast path in both widths.
pub trait Scalar:
    Copy + PartialOrd + Default + Debug + Display + Send + Sync + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
    fn to_f64(self) -> f64;

    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn is_finite(self) -> bool;

    fn maxs(self, other: Self) -> Self;

    /// C ← alpha·A·B + beta·C over raw row-/col-stride views.
    /// Same contract as matrixmultiply's sgemm/dgemm.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline(always)]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline(always)]
            fn from_f32(x: f32) -> Self {
                x as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln_1p(self) -> Self {
                self.ln_1p()
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            #[inline(always)]
            fn maxs(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }

            #[inline]
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Numerically stable softplus of the *negated* argument:
/// σ(x) = log(1 + exp(−x)) = max(−x, 0) + log1p(exp(−|x|)).
/// This is the negative log-sigmoid used by the FF and SymBa losses; the
/// rearrangement avoids exp overflow for arguments out to ±1e4 and beyond.
pub fn neg_log_sigmoid<T: Scalar>(x: T) -> T {
    let neg = T::ZERO.maxs(T::from_f64(-x.to_f64()));
    let e = T::from_f64((-x.abs().to_f64()).exp());
    T::from_f64(neg.to_f64() + e.to_f64().ln_1p())
}

/// d/dx of neg_log_sigmoid(x) = −1/(1+exp(x)) = −sigmoid(−x),
/// computed without overflow on either tail.
pub fn neg_log_sigmoid_grad<T: Scalar>(x: T) -> T {
    let x = x.to_f64();
    let s = if x >= 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    };
    T::from_f64(-s)
}
