use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type usable by the engine.
///
/// Implemented for `f32` (training and inference) and `f64` (gradient
/// checking).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const DTYPE: &'static str;

    fn erf(self) -> Self;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(
        rs >= 0 && cs >= 0,
        "negative strides unsupported for {what}"
    );
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand {what} out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr, $erf:path, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides, "a");
                check_extent(b.len(), k, n, b_strides, "b");
                check_extent(c.len(), m, n, c_strides, "c");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel is bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", libm::erff, matrixmultiply::sgemm);
impl_scalar!(f64, "f64", libm::erf, matrixmultiply::dgemm);
