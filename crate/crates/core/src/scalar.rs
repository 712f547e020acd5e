use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Element type of every tensor in the crate.
///
/// Implemented for `f32` (training default) and `f64` (gradient checks).
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Width in bits, recorded in run metadata.
    const BITS: u32;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// `c[m×n] += A·B` with `A[i][p] = a[i·sa[0] + p·sa[1]]`, `B` likewise
    /// through `sb`, and `c` row-major and contiguous.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [usize; 2], b: &[Self], sb: [usize; 2], c: &mut [Self]);
}

fn check_extent(len: usize, rows: usize, cols: usize, s: [usize; 2], what: &str) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * s[0] + (cols - 1) * s[1];
        assert!(last < len, "gemm: {what} has {len} elements, needs {}", last + 1);
    }
}

macro_rules! impl_scalar {
    ($t:ty, $bits:expr, $gemm:path) => {
        impl Scalar for $t {
            const BITS: u32 = $bits;

            fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [usize; 2], b: &[Self], sb: [usize; 2], c: &mut [Self]) {
                check_extent(a.len(), m, k, sa, "a");
                check_extent(b.len(), k, n, sb, "b");
                assert_eq!(c.len(), m * n, "gemm: output size");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the extents checked above keep every strided access in bounds.
                unsafe {
                    $gemm(
                        m, k, n, 1.0, a.as_ptr(), sa[0] as isize, sa[1] as isize, b.as_ptr(), sb[0] as isize,
                        sb[1] as isize, 1.0, c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, 32, matrixmultiply::sgemm);
impl_scalar!(f64, 64, matrixmultiply::dgemm);
