//! Floating-point scalar abstraction shared by every numeric routine.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of a [`crate::tensor::Tensor`].
///
/// Implemented for `f32` and `f64`. Matrix products are dispatched to the
/// matching `matrixmultiply` kernel.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + LowerExp
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Short type tag written into exports ("f32" / "f64").
    const NAME: &'static str;

    /// Logit value used for disallowed attention positions.
    fn mask_value() -> Self;

    /// `C <- A·B + beta·C` over strided row/column layouts.
    ///
    /// `A` is `m×k`, `B` is `k×n`, `C` is `m×n`. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).unwrap_or_else(Self::nan)
    }

    fn from_usize_lossy(x: usize) -> Self {
        <Self as FromPrimitive>::from_usize(x).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

/// Below this many multiply-adds, packing overhead dominates the blocked
/// kernel and a direct loop is faster.
const SMALL_GEMM: usize = 32 * 32 * 32;

#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
    rsc: isize,
    csc: isize,
) {
    let (rsa, csa, rsb, csb, rsc, csc) = (
        rsa as usize,
        csa as usize,
        rsb as usize,
        csb as usize,
        rsc as usize,
        csc as usize,
    );
    for i in 0..m {
        for j in 0..n {
            let x = &mut c[i * rsc + j * csc];
            // beta = 0 must not propagate NaN from the old contents
            *x = if beta == T::zero() { T::zero() } else { beta * *x };
        }
    }
    if csb == 1 && csc == 1 {
        for i in 0..m {
            let crow = &mut c[i * rsc..i * rsc + n];
            for p in 0..k {
                let aip = a[i * rsa + p * csa];
                let brow = &b[p * rsb..p * rsb + n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + aip * bv;
                }
            }
        }
    } else {
        // csa == 1 && rsb == 1: rows of A against columns of B
        for i in 0..m {
            let arow = &a[i * rsa..i * rsa + k];
            for j in 0..n {
                let bcol = &b[j * csb..j * csb + k];
                let acc = arow
                    .iter()
                    .zip(bcol)
                    .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                let x = &mut c[i * rsc + j * csc];
                *x = *x + acc;
            }
        }
    }
}

/// Layouts the direct loop handles with unit-stride inner loops.
fn small_layout(csa: isize, rsb: isize, csb: isize, csc: isize) -> bool {
    (csb == 1 && csc == 1) || (csa == 1 && rsb == 1)
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $mask:expr, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn mask_value() -> Self {
                $mask
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                if m * k * n <= SMALL_GEMM && small_layout(csa, rsb, csb, csc) {
                    small_gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above and
                // `c` is uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f64, "f64", -1e30, matrixmultiply::dgemm);
impl_scalar!(f32, "f32", -1e30, matrixmultiply::sgemm);
