//! Slice-level dense kernels.
//!
//! Every output element is reduced in a fixed order that does not depend on
//! threading, so results are identical run to run and between the parallel
//! and sequential back ends.

use crate::exec;
use crate::scalar::Scalar;

/// Inner product with eight interleaved partial sums combined pairwise.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// `c[m×p] = a[m×k] · b[k×p]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    let mut c = vec![T::zero(); m * p];
    if p == 0 {
        return c;
    }
    exec::for_each_chunk_mut(&mut c, p, m * k * p, |i, row| {
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(aik, &b[kk * p..(kk + 1) * p], row);
        }
    });
    c
}

/// `c[m×p] = a[m×k] · b[p×k]ᵀ`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), p * k);
    let mut c = vec![T::zero(); m * p];
    if p == 0 {
        return c;
    }
    exec::for_each_chunk_mut(&mut c, p, m * k * p, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, cij) in row.iter_mut().enumerate() {
            *cij = dot(ai, &b[j * k..(j + 1) * k]);
        }
    });
    c
}

/// `c[m×p] = a[k×m]ᵀ · b[k×p]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, p: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * p);
    let mut c = vec![T::zero(); m * p];
    if p == 0 {
        return c;
    }
    exec::for_each_chunk_mut(&mut c, p, m * k * p, |i, row| {
        for kk in 0..k {
            axpy(a[kk * m + i], &b[kk * p..(kk + 1) * p], row);
        }
    });
    c
}

/// `c[m×p] += a[k×m]ᵀ · b[k×p]`, the weight-gradient accumulation.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, p: usize, c: &mut [T]) {
    debug_assert_eq!(c.len(), m * p);
    if p == 0 {
        return;
    }
    exec::for_each_chunk_mut(c, p, m * k * p, |i, row| {
        for kk in 0..k {
            axpy(a[kk * m + i], &b[kk * p..(kk + 1) * p], row);
        }
    });
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..13).map(|i| i as f64).collect();
        assert_eq!(dot(&a, &a), (0..13).map(|i| (i * i) as f64).sum::<f64>());
    }

    #[test]
    fn transposed_variants_agree() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect(); // 3×4
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.11).cos()).collect(); // 4×5
        let c = matmul(&a, &b, 3, 4, 5);
        let c_nt = matmul_nt(&a, &transpose(&b, 4, 5), 3, 4, 5);
        let c_tn = matmul_tn(&transpose(&a, 3, 4), &b, 4, 3, 5);
        for i in 0..15 {
            assert!((c[i] - c_nt[i]).abs() < 1e-14);
            assert!((c[i] - c_tn[i]).abs() < 1e-14);
        }
    }
}
