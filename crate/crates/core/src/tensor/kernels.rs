//! Row-major matrix products, all accumulating into `c`.

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, [k, 1], b, [n, 1], c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, [k, 1], b, [1, k], c);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(k, m, n, a, [1, k], b, [n, 1], c);
}
