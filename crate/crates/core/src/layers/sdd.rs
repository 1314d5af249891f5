//! Scale-distribution decoupled linear layer, `y = α ⊙ norm(V x)`.
//!
//! `norm` is the RMS normalization `z / √(mean(z²) + ε)` taken over the output
//! dimension, so rectangular `V` is allowed. With `ε = 0` the output does not
//! depend on the scale of `V` at all: `α` carries the magnitude and `V` only
//! the direction of each output row.

use super::tape::Tape;
use super::{ParamKind, Parameter};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::norm::{rms_eps, vjp_into};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct SddLinear<T: Scalar> {
    /// `[out × in]`
    pub v: Parameter<T>,
    /// `[out]`
    pub alpha: Parameter<T>,
    pub eps: f64,
}

impl<T: Scalar> SddLinear<T> {
    pub fn new(name: &str, v: Tensor<T>, alpha: Tensor<T>, eps: f64) -> Result<Self> {
        if v.shape().len() != 2 || alpha.shape() != [v.shape()[0]] {
            return Err(shape_err("SddLinear::new", format!("alpha [{}]", v.shape()[0]), format!("{:?}", alpha.shape())));
        }
        Ok(Self {
            v: Parameter::new(format!("{name}.v"), v, ParamKind::Weight),
            alpha: Parameter::new(format!("{name}.alpha"), alpha, ParamKind::Scale),
            eps,
        })
    }

    /// `α` filled with a constant.
    pub fn with_constant_alpha(name: &str, v: Tensor<T>, alpha: f64, eps: f64) -> Result<Self> {
        let out = v.shape()[0];
        Self::new(name, v, Tensor::full(&[out], T::of(alpha)), eps)
    }

    pub fn in_dim(&self) -> usize {
        self.v.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.v.value.shape()[0]
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache<T: Scalar> {
    pub x: Tensor<T>,
    /// `z = V x` per row.
    pub z: Tensor<T>,
    /// `√(mean(z²) + ε)` per row.
    pub z_rms: Vec<T>,
    /// `z / z_rms` per row.
    pub normed: Tensor<T>,
}

/// Gradients of one SDD layer, summed over the batch.
#[derive(Clone, Debug)]
pub struct SddGrads<T: Scalar> {
    pub dv: Tensor<T>,
    pub dalpha: Tensor<T>,
    pub dx: Tensor<T>,
}

pub fn sdd_forward<T: Scalar>(layer: &SddLinear<T>, x: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
    if x.cols() != layer.in_dim() {
        return Err(shape_err("sdd_forward", layer.in_dim(), x.cols()));
    }
    x.ensure_finite("sdd_forward")?;
    let z = x.matmul_nt(&layer.v.value)?;
    let out = layer.out_dim();
    let eps = T::of(layer.eps);
    let mut z_rms = Vec::with_capacity(z.rows());
    let mut normed = Tensor::zeros(z.shape());
    let mut y = Tensor::zeros(z.shape());
    let alpha = layer.alpha.value.data();
    for r in 0..z.rows() {
        let zr = &z.data()[r * out..(r + 1) * out];
        let s = rms_eps(zr, eps);
        if s == T::zero() {
            return Err(Error::ZeroNorm { op: "sdd_forward" });
        }
        let inv = T::one() / s;
        let nr = &mut normed.data_mut()[r * out..(r + 1) * out];
        for (n, &zi) in nr.iter_mut().zip(zr) {
            *n = zi * inv;
        }
        let yr = &mut y.data_mut()[r * out..(r + 1) * out];
        for ((yi, &ni), &a) in yr.iter_mut().zip(&normed.data()[r * out..(r + 1) * out]).zip(alpha) {
            *yi = a * ni;
        }
        z_rms.push(s);
    }
    y.ensure_finite("sdd_forward")?;
    Ok((
        y,
        LayerCache {
            x: x.clone(),
            z,
            z_rms,
            normed,
        },
    ))
}

fn check_cache<T: Scalar>(layer: &SddLinear<T>, cache: &LayerCache<T>, dy: &Tensor<T>) -> Result<()> {
    if cache.x.cols() != layer.in_dim() || cache.z.cols() != layer.out_dim() || cache.z_rms.len() != cache.z.rows() {
        return Err(Error::CacheMismatch(format!(
            "layer [{} × {}], cache x {:?} z {:?}",
            layer.out_dim(),
            layer.in_dim(),
            cache.x.shape(),
            cache.z.shape()
        )));
    }
    if dy.shape() != cache.z.shape() {
        return Err(shape_err("sdd_backward", format!("{:?}", cache.z.shape()), format!("{:?}", dy.shape())));
    }
    Ok(())
}

/// Exact gradients via the normalization projector:
/// `∂L/∂α = Σ ∂L/∂y ⊙ norm(z)`, `h = (g − z (zᵀg)/(n s²)) / s` with `g = ∂L/∂y ⊙ α`,
/// `∂L/∂V = Σ h xᵀ`, `∂L/∂x = Vᵀ h`.
pub fn sdd_backward_closed_form<T: Scalar>(
    layer: &SddLinear<T>,
    cache: &LayerCache<T>,
    dy: &Tensor<T>,
) -> Result<SddGrads<T>> {
    check_cache(layer, cache, dy)?;
    let out = layer.out_dim();
    let alpha = layer.alpha.value.data();
    let mut dalpha = vec![T::zero(); out];
    let mut h = Tensor::zeros(cache.z.shape());
    let mut g = vec![T::zero(); out];
    for r in 0..cache.z.rows() {
        let span = r * out..(r + 1) * out;
        let dyr = &dy.data()[span.clone()];
        for ((da, &d), &n) in dalpha.iter_mut().zip(dyr).zip(&cache.normed.data()[span.clone()]) {
            *da = *da + d * n;
        }
        for ((gi, &d), &a) in g.iter_mut().zip(dyr).zip(alpha) {
            *gi = d * a;
        }
        vjp_into(&cache.z.data()[span.clone()], &g, cache.z_rms[r], &mut h.data_mut()[span]);
    }
    let dv = h.matmul_tn(&cache.x)?;
    let dx = h.matmul(&layer.v.value)?;
    Ok(SddGrads {
        dv,
        dalpha: Tensor::new(vec![out], dalpha)?,
        dx,
    })
}

/// The same gradients obtained by reverse-mode differentiation of the forward
/// written as elementary operations (matmul, square, row mean, shift, square
/// root, reciprocal, broadcast products). Shares no code with the projector
/// formula above.
pub fn sdd_backward_composed<T: Scalar>(
    layer: &SddLinear<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<SddGrads<T>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vv = tape.leaf(layer.v.value.clone());
    let av = tape.leaf(layer.alpha.value.clone());
    let z = tape.matmul_nt(xv, vv)?;
    let sq = tape.square(z);
    let mean = tape.row_mean(sq)?;
    let shifted = tape.add_scalar(mean, layer.eps);
    let s = tape.sqrt(shifted);
    let inv = tape.recip(s);
    let normed = tape.mul_row_scalar(z, inv)?;
    let y = tape.mul_col_vec(normed, av)?;
    let grads = tape.backward(y, dy.clone())?;
    Ok(SddGrads {
        dv: grads.get(vv).cloned().unwrap_or_else(|| Tensor::zeros(layer.v.value.shape())),
        dalpha: grads.get(av).cloned().unwrap_or_else(|| Tensor::zeros(layer.alpha.value.shape())),
        dx: grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian, rms, RngState};

    fn layer(v: Tensor<f64>, alpha: &[f64], eps: f64) -> SddLinear<f64> {
        SddLinear::new("sdd", v, Tensor::vector(alpha).unwrap(), eps).unwrap()
    }

    #[test]
    fn constant_input_normalizes_to_alpha() {
        let x = Tensor::from_rows(&[&[2.0, 2.0]]).unwrap();
        let (y, _) = sdd_forward(&layer(Tensor::identity(2), &[1.0, 1.0], 0.0), &x).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0]);
        let (y, _) = sdd_forward(&layer(Tensor::identity(2), &[3.0, 5.0], 0.0), &x).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
    }

    #[test]
    fn normalized_rows_have_unit_rms() {
        let mut rng = RngState::new(8);
        let v = gaussian(&[64, 64], 0.0, 0.1, &mut rng);
        let alpha: Vec<f64> = (0..64).map(|i| 0.5 + i as f64 / 64.0).collect();
        let l = layer(v, &alpha, 0.0);
        let x = gaussian(&[3, 64], 0.0, 1.0, &mut rng);
        let (y, cache) = sdd_forward(&l, &x).unwrap();
        for r in 0..3 {
            let ratio: Vec<f64> = y.row(r).iter().zip(&alpha).map(|(a, b)| a / b).collect();
            assert!((rms(&ratio) - 1.0).abs() < 1e-6);
            let back: Vec<f64> = cache.normed.row(r).iter().map(|n| n * cache.z_rms[r]).collect();
            for (a, b) in back.iter().zip(cache.z.row(r)) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = RngState::new(9);
        let l = layer(gaussian(&[4, 4], 0.0, 1.0, &mut rng), &[1.0; 4], 0.0);
        let x = gaussian(&[2, 4], 0.0, 1.0, &mut rng);
        let (_, c) = sdd_forward(&l, &x).unwrap();
        let g = sdd_backward_closed_form(&l, &c, &Tensor::zeros(&[2, 4])).unwrap();
        assert_eq!(g.dv.max_abs() + g.dalpha.max_abs() + g.dx.max_abs(), 0.0);
    }

    #[test]
    fn hand_evaluated_case() {
        let l = layer(Tensor::identity(2), &[1.0, 1.0], 0.0);
        let x = Tensor::from_rows(&[&[2f64.sqrt(), 0.0]]).unwrap();
        let (_, c) = sdd_forward(&l, &x).unwrap();
        assert!((c.z_rms[0] - 1.0).abs() < 1e-15);
        let g = sdd_backward_closed_form(&l, &c, &Tensor::from_rows(&[&[0.0, 1.0]]).unwrap()).unwrap();
        assert!(g.dalpha.max_abs() < 1e-15);
        assert!(g.dx.data()[0].abs() < 1e-15 && (g.dx.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scale_invariance_in_v() {
        let mut rng = RngState::new(10);
        let v = gaussian(&[16, 12], 0.0, 1.0, &mut rng);
        let x = gaussian(&[5, 12], 0.0, 1.0, &mut rng);
        let alpha: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let (y1, _) = sdd_forward(&layer(v.clone(), &alpha, 0.0), &x).unwrap();
        for c in [0.01, 3.0, 250.0] {
            let (yc, _) = sdd_forward(&layer(v.scale(c).unwrap(), &alpha, 0.0), &x).unwrap();
            assert!(yc.max_abs_diff(&y1) < 1e-12);
        }
    }

    #[test]
    fn closed_form_matches_composed() {
        let mut rng = RngState::new(12);
        for _ in 0..10 {
            let l = layer(gaussian(&[7, 5], 0.0, 1.0, &mut rng), &[0.3, -1.0, 2.0, 0.7, 1.1, 0.9, -0.4], 1e-8);
            let x = gaussian(&[3, 5], 0.0, 1.0, &mut rng);
            let dy = gaussian(&[3, 7], 0.0, 1.0, &mut rng);
            let (_, c) = sdd_forward(&l, &x).unwrap();
            let a = sdd_backward_closed_form(&l, &c, &dy).unwrap();
            let b = sdd_backward_composed(&l, &x, &dy).unwrap();
            for (p, q) in [(&a.dv, &b.dv), (&a.dalpha, &b.dalpha), (&a.dx, &b.dx)] {
                assert!(p.max_abs_diff(q) <= 1e-12 * q.max_abs().max(1e-300));
            }
        }
    }

    #[test]
    fn degenerate_input_without_eps() {
        let l = layer(Tensor::identity(2), &[1.0, 1.0], 0.0);
        assert!(matches!(sdd_forward(&l, &Tensor::zeros(&[1, 2])), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn cache_mismatch_detected() {
        let l = layer(Tensor::identity(2), &[1.0, 1.0], 0.0);
        let other = layer(Tensor::identity(3), &[1.0; 3], 0.0);
        let (_, c) = sdd_forward(&other, &Tensor::full(&[1, 3], 1.0)).unwrap();
        assert!(matches!(
            sdd_backward_closed_form(&l, &c, &Tensor::zeros(&[1, 3])),
            Err(Error::CacheMismatch(_))
        ));
    }
}
