//! RMS normalization `x / √(mean(x²) + ε)`, its vector-Jacobian product, and
//! the Frobenius norm.

use super::{kernels, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// `√(mean(x²))`
pub fn rms<T: Scalar>(x: &[T]) -> T {
    (kernels::dot(x, x) / T::of(x.len() as f64)).sqrt()
}

/// Stabilized RMS `√(mean(x²) + ε)`.
#[inline]
pub(crate) fn rms_eps<T: Scalar>(x: &[T], eps: T) -> T {
    (kernels::dot(x, x) / T::of(x.len() as f64) + eps).sqrt()
}

pub fn rms_norm<T: Scalar>(x: &[T], eps: f64) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(shape_err("rms_norm", "n >= 1", 0));
    }
    let r = rms_eps(x, T::of(eps));
    if r == T::zero() {
        return Err(Error::ZeroNorm { op: "rms_norm" });
    }
    let out: Vec<T> = x.iter().map(|&v| v / r).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "rms_norm" });
    }
    Ok(out)
}

/// `gᵀ · ∂norm(z)/∂z` with `∂norm(z)/∂z = (I − z zᵀ / (n‖z‖²)) / ‖z‖`,
/// `‖z‖` the RMS of `z`.
pub fn rms_norm_vjp<T: Scalar>(z: &[T], g: &[T]) -> Result<Vec<T>> {
    rms_norm_vjp_eps(z, g, 0.0)
}

/// Same projector with `‖z‖` replaced by `√(mean(z²) + ε)`, the exact
/// Jacobian of the stabilized normalization.
pub fn rms_norm_vjp_eps<T: Scalar>(z: &[T], g: &[T], eps: f64) -> Result<Vec<T>> {
    if z.len() != g.len() {
        return Err(shape_err("rms_norm_vjp", z.len(), g.len()));
    }
    let s = rms_eps(z, T::of(eps));
    if s == T::zero() {
        return Err(Error::ZeroNorm { op: "rms_norm_vjp" });
    }
    let mut out = vec![T::zero(); z.len()];
    vjp_into(z, g, s, &mut out);
    Ok(out)
}

/// Writes `(g − z·(zᵀg)/(n s²)) / s` into `out`.
#[inline]
pub(crate) fn vjp_into<T: Scalar>(z: &[T], g: &[T], s: T, out: &mut [T]) {
    let n = T::of(z.len() as f64);
    let coef = kernels::dot(z, g) / (n * s * s);
    let inv = T::one() / s;
    for ((o, &zi), &gi) in out.iter_mut().zip(z).zip(g) {
        *o = (gi - zi * coef) * inv;
    }
}

/// `√(Σ mᵢⱼ²)`, accumulated in `f64`.
pub fn frobenius_norm<T: Scalar>(m: &Tensor<T>) -> f64 {
    m.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}
