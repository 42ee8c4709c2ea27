//! Row-major matrix kernels. Every inner loop is an `axpy` over a contiguous
//! row so it vectorizes, and the summation order is fixed.

use super::Real;

#[inline]
pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn mm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip != T::zero() {
                axpy(c_row, aip, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn mm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api != T::zero() {
                axpy(&mut c[i * n..(i + 1) * n], api, b_row);
            }
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn mm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(&b[..n * k], n, k);
    mm_nn(a, &bt, c, m, k, n);
}
