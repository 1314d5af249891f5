//! Dense row-major tensors, deterministic sampling and small-matrix linear
//! algebra.

pub mod kernels;
pub mod norm;
pub mod rng;
pub mod svd;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

pub use norm::{frobenius_norm, rms, rms_norm, rms_norm_vjp, rms_norm_vjp_eps};
pub use rng::{derive_seed, gaussian, truncated_gaussian, RngState};
pub use svd::{svd, svd_with_limit, SvdResult, DEFAULT_MAX_SWEEPS};

/// Dense row-major array. Public operations reject non-finite results.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Checked constructor: length must match the shape and values must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("Tensor::new", format!("{n} elements for {shape:?}"), data.len()));
        }
        let t = Self { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, &v) in values.iter().enumerate() {
            t.data[i * n + i] = v;
        }
        t
    }

    /// Matrix from row slices given in `f64`.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("Tensor::from_rows", "equal row lengths", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v))).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Leading dimension (1 for scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", self.data.len(), format!("{shape:?}")));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(shape_err(op, "matrix", format!("{s:?}"))),
        }
    }

    /// `self[m×k] · other[k×p]`
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, p) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dim {k}"), k2));
        }
        let out = Self::from_parts(vec![m, p], kernels::matmul(&self.data, &other.data, m, k, p));
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    /// `self[m×k] · other[p×k]ᵀ`
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.matrix_dims("matmul_nt")?;
        let (p, k2) = other.matrix_dims("matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("inner dim {k}"), k2));
        }
        let out = Self::from_parts(vec![m, p], kernels::matmul_nt(&self.data, &other.data, m, k, p));
        out.ensure_finite("matmul_nt")?;
        Ok(out)
    }

    /// `self[k×m]ᵀ · other[k×p]`
    pub fn matmul_tn(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, m) = self.matrix_dims("matmul_tn")?;
        let (k2, p) = other.matrix_dims("matmul_tn")?;
        if k != k2 {
            return Err(shape_err("matmul_tn", format!("inner dim {k}"), k2));
        }
        let out = Self::from_parts(vec![m, p], kernels::matmul_tn(&self.data, &other.data, k, m, p));
        out.ensure_finite("matmul_tn")?;
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = self.matrix_dims("transpose")?;
        Ok(Self::from_parts(vec![c, r], kernels::transpose(&self.data, r, c)))
    }

    fn zip_with(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(shape_err(op, format!("{:?}", self.shape), format!("{:?}", other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        let out = Self::from_parts(self.shape.clone(), data);
        out.ensure_finite(op)?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        self.map("scale", |v| v * c)
    }

    pub fn map(&self, op: &'static str, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let out = Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect());
        out.ensure_finite(op)?;
        Ok(out)
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err("add_assign", format!("{:?}", self.shape), format!("{:?}", other.shape)));
        }
        kernels::axpy(T::one(), &other.data, &mut self.data);
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| U::of(v.as_f64())).collect())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = Tensor::zeros(&[m, p]);
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.data()[i * k + t] * b.data()[t * p + j];
                }
                c.data_mut()[i * p + j] = s;
            }
        }
        c
    }

    #[test]
    fn identity_product() {
        let i2 = Tensor::<f64>::identity(2);
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(i2.matmul(&m).unwrap(), m);
    }

    #[test]
    fn unit_column_selection() {
        let m = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let e = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
        assert_eq!(m.matmul(&e).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn random_matches_triple_loop() {
        let mut rng = RngState::new(1);
        let a = gaussian::<f64>(&[8, 8], 0.0, 1.0, &mut rng);
        let b = gaussian::<f64>(&[8, 8], 0.0, 1.0, &mut rng);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&naive(&a, &b)) < 1e-12);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn overflow_surfaces_as_error() {
        let a = Tensor::<f32>::full(&[1, 2], 1e30);
        let b = Tensor::<f32>::full(&[2, 1], 1e30);
        assert!(matches!(a.matmul(&b), Err(Error::NonFinite { .. })));
        assert!(Tensor::<f64>::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn matmul_is_deterministic() {
        let mut rng = RngState::new(2);
        let a = gaussian::<f32>(&[64, 96], 0.0, 1.0, &mut rng);
        let b = gaussian::<f32>(&[96, 80], 0.0, 1.0, &mut rng);
        assert_eq!(a.matmul(&b).unwrap().data(), a.matmul(&b).unwrap().data());
    }
}
