//! One-sided (Hestenes) Jacobi SVD for square matrices.
//!
//! Column pairs of a working copy of `M` are rotated until every pair is
//! orthogonal to within [`OFF_DIAGONAL_TOL`]; the accumulated rotations form
//! `V`, the column norms are the singular values and the normalized columns
//! form `U`. Columns are stored as contiguous rows of `Mᵀ` so that each pair
//! update streams through memory.

use super::Tensor;
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_MAX_SWEEPS: usize = 100;
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
pub const MAX_DIM: usize = 2048;

/// `M = U · diag(sigma) · v_t`, singular values descending.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Tensor<f64>,
    pub sigma: Vec<f64>,
    pub v_t: Tensor<f64>,
    pub sweeps: usize,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Tensor<f64> {
        let n = self.sigma.len();
        let mut us = self.u.clone();
        for r in 0..n {
            for (c, s) in self.sigma.iter().enumerate() {
                us.data_mut()[r * n + c] *= s;
            }
        }
        us.matmul(&self.v_t).expect("svd factors are square and finite")
    }

    /// `max(‖UᵀU − I‖_max, ‖VᵀV − I‖_max)`
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.sigma.len();
        let eye = Tensor::identity(n);
        let utu = self.u.matmul_tn(&self.u).expect("square");
        let vvt = self.v_t.matmul_nt(&self.v_t).expect("square");
        utu.max_abs_diff(&eye).max(vvt.max_abs_diff(&eye))
    }
}

pub fn svd(m: &Tensor<f64>) -> Result<SvdResult> {
    svd_with_limit(m, DEFAULT_MAX_SWEEPS)
}

#[inline]
fn dot3(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut aa = [0.0; 4];
    let mut bb = [0.0; 4];
    let mut ab = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            aa[l] += x[l] * x[l];
            bb[l] += y[l] * y[l];
            ab[l] += x[l] * y[l];
        }
    }
    let mut t = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(rb) {
        t.0 += x * x;
        t.1 += y * y;
        t.2 += x * y;
    }
    let fold = |v: [f64; 4]| (v[0] + v[1]) + (v[2] + v[3]);
    (fold(aa) + t.0, fold(bb) + t.1, fold(ab) + t.2)
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let (a, b) = (*xi, *yi);
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

fn pair_mut(rows: &mut [f64], n: usize, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i < j);
    let (lo, hi) = rows.split_at_mut(j * n);
    (&mut lo[i * n..(i + 1) * n], &mut hi[..n])
}

pub fn svd_with_limit(m: &Tensor<f64>, max_sweeps: usize) -> Result<SvdResult> {
    let n = match m.shape() {
        [r, c] if r == c => *r,
        s => return Err(shape_err("svd", "square matrix", format!("{s:?}"))),
    };
    if n > MAX_DIM {
        return Err(shape_err("svd", format!("n <= {MAX_DIM}"), n));
    }
    m.ensure_finite("svd")?;

    // Row k of `cols` is column k of the working matrix; same for `vcols`.
    let mut cols = m.transpose()?.into_data();
    let mut vcols = Tensor::<f64>::identity(n).into_data();

    let mut sweeps = 0;
    loop {
        let mut max_off: f64 = 0.0;
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (ci, cj) = pair_mut(&mut cols, n, i, j);
                let (alpha, beta, gamma) = dot3(ci, cj);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                max_off = max_off.max(off);
                if off <= OFF_DIAGONAL_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(ci, cj, c, s);
                let (vi, vj) = pair_mut(&mut vcols, n, i, j);
                rotate(vi, vj, c, s);
            }
        }
        sweeps += 1;
        if !rotated {
            break;
        }
        if sweeps >= max_sweeps {
            return Err(Error::SvdNoConvergence {
                sweeps,
                off_diagonal: max_off,
            });
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|k| cols[k * n..(k + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let sigma_max = norms.iter().cloned().fold(0.0, f64::max);
    let rank_tol = sigma_max * (n as f64) * f64::EPSILON;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (pos, &k) in order.iter().enumerate() {
        if norms[k] > rank_tol && norms[k] > 0.0 {
            u_cols.push(cols[k * n..(k + 1) * n].iter().map(|v| v / norms[k]).collect());
        } else {
            u_cols.push(vec![0.0; n]);
            deficient.push(pos);
        }
    }
    complete_basis(&mut u_cols, &deficient);

    let sigma: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let mut u = vec![0.0; n * n];
    let mut v_t = vec![0.0; n * n];
    for (pos, &k) in order.iter().enumerate() {
        for r in 0..n {
            u[r * n + pos] = u_cols[pos][r];
        }
        v_t[pos * n..(pos + 1) * n].copy_from_slice(&vcols[k * n..(k + 1) * n]);
    }
    Ok(SvdResult {
        u: Tensor::new(vec![n, n], u)?,
        sigma,
        v_t: Tensor::new(vec![n, n], v_t)?,
        sweeps,
    })
}

/// Fills the listed columns with unit vectors orthogonal to every other column
/// (modified Gram-Schmidt over the standard basis).
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let n = cols.len();
    let mut candidate = 0;
    for &slot in missing {
        while candidate < n {
            let mut v = vec![0.0; n];
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || c.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let p: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(c).for_each(|(vi, ci)| *vi -= p * ci);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[slot] = v.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian, RngState};

    fn check(m: &Tensor<f64>) -> SvdResult {
        let r = svd(m).unwrap();
        assert!(r.orthogonality_error() < 1e-10, "orth {}", r.orthogonality_error());
        let scale = m.max_abs().max(f64::MIN_POSITIVE);
        let rec = r.reconstruct().max_abs_diff(m) / scale;
        assert!(rec < 1e-9, "reconstruction {rec}");
        assert!(r.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.sigma.iter().all(|&s| s >= 0.0));
        r
    }

    #[test]
    fn identity() {
        assert_eq!(check(&Tensor::identity(4)).sigma, vec![1.0; 4]);
    }

    #[test]
    fn diagonal() {
        let r = check(&Tensor::diag(&[3.0, 2.0, 1.0]));
        assert_eq!(r.sigma, vec![3.0, 2.0, 1.0]);
        for i in 0..3 {
            assert_eq!(r.u.data()[i * 3 + i].abs(), 1.0);
            assert_eq!(r.v_t.data()[i * 3 + i].abs(), 1.0);
        }
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let r = check(&Tensor::diag(&[1.0, -5.0, 2.0]));
        assert_eq!(r.sigma, vec![5.0, 2.0, 1.0]);
    }

    #[test]
    fn random_gaussian() {
        let mut rng = RngState::new(16);
        for n in [2, 5, 16, 40] {
            check(&gaussian(&[n, n], 0.0, 1.0, &mut rng));
        }
    }

    #[test]
    fn rank_deficient() {
        let m = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[0.0, 0.0, 0.0]]).unwrap();
        let r = check(&m);
        assert!(r.sigma[1] < 1e-12 && r.sigma[2] < 1e-12);
        check(&Tensor::zeros(&[3, 3]));
    }

    #[test]
    fn rejects_rectangular_and_non_finite() {
        assert!(svd(&Tensor::zeros(&[2, 3])).is_err());
        let mut m = Tensor::<f64>::identity(2);
        m.data_mut()[1] = f64::INFINITY;
        assert!(svd(&m).is_err());
    }

    #[test]
    fn sweep_cap_is_reported() {
        let mut rng = RngState::new(3);
        let m = gaussian(&[12, 12], 0.0, 1.0, &mut rng);
        assert!(matches!(svd_with_limit(&m, 1), Err(Error::SvdNoConvergence { sweeps: 1, .. })));
    }
}
