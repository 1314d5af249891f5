//! Global-norm clipping and AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::layers::{Module, ParamKind};
use crate::scalar::Scalar;

use super::config::TrainConfig;

/// Global L2 norm of all gradients.
pub fn global_grad_norm<T: Scalar>(model: &dyn Module<T>) -> f64 {
    let mut sq = 0.0f64;
    model.visit_params(&mut |p| {
        sq += p.grad.data().iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
    });
    sq.sqrt()
}

/// Scales all gradients by `max_norm / g` when the global norm `g` exceeds
/// `max_norm`; returns the applied scale. Non-finite gradients are an error
/// and leave the gradients untouched.
pub fn clip_grads<T: Scalar>(model: &mut dyn Module<T>, max_norm: f64) -> Result<f64> {
    let g = global_grad_norm(model);
    if !g.is_finite() {
        return Err(Error::NonFinite { op: "clip_grads" });
    }
    if g <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / g;
    let s = T::of(scale);
    model.visit_params_mut(&mut |p| {
        for v in p.grad.data_mut() {
            *v = *v * s;
        }
    });
    Ok(scale)
}

/// First and second moments, one buffer per parameter in visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model: &dyn Module<T>) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |p| m.push(vec![T::zero(); p.numel()]));
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One bias-corrected AdamW update; `α` vectors and norm gains are not decayed.
    pub fn step(&mut self, model: &mut dyn Module<T>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |p| {
            let decay = if p.kind == ParamKind::Scale { 0.0 } else { cfg.weight_decay };
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            idx += 1;
            let grads = p.grad.data().to_vec();
            for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                let m_new = b1 * mi.as_f64() + (1.0 - b1) * g;
                let v_new = b2 * vi.as_f64() + (1.0 - b2) * g * g;
                *mi = T::of(m_new);
                *vi = T::of(v_new);
                let (m_hat, v_hat) = (mi.as_f64() / c1, vi.as_f64() / c2);
                let x = w.as_f64();
                *w = T::of(x - lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + decay * x));
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Parameter, StandardLinear};
    use crate::Tensor;

    fn layer(w: &[f64], g: &[f64]) -> StandardLinear<f64> {
        let mut l = StandardLinear::new("l", Tensor::new(vec![1, w.len()], w.to_vec()).unwrap());
        l.w.grad = Tensor::new(vec![1, g.len()], g.to_vec()).unwrap();
        l
    }

    struct One(StandardLinear<f64>);
    impl Module<f64> for One {
        fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<f64>)) {
            f(&self.0.w)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<f64>)) {
            f(&mut self.0.w)
        }
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut m = One(layer(&[0.0, 0.0], &[0.3, 0.4]));
        assert_eq!(clip_grads(&mut m, 1.0).unwrap(), 1.0);
        assert_eq!(m.0.w.grad.data(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut m = One(layer(&[0.0, 0.0], &[0.0, 4.0]));
        assert_eq!(clip_grads(&mut m, 1.0).unwrap(), 0.25);
        assert!((global_grad_norm(&m) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn clip_rejects_nan() {
        let mut m = One(layer(&[0.0, 0.0], &[0.0, 1.0]));
        m.0.w.grad.data_mut()[0] = f64::NAN;
        assert!(matches!(clip_grads(&mut m, 1.0), Err(Error::NonFinite { .. })));
        assert_eq!(m.0.w.grad.data()[1], 1.0);
    }

    #[test]
    fn zero_grad_no_decay_leaves_params() {
        let mut m = One(layer(&[0.5, -2.0], &[0.0, 0.0]));
        let mut opt = AdamW::new(&m);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        opt.step(&mut m, 1e-2, &cfg);
        assert_eq!(m.0.w.value.data(), &[0.5, -2.0]);
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let mut m = One(layer(&[0.0, 0.0, 0.0], &[3.0, -0.001, 0.0]));
        let mut opt = AdamW::new(&m);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        opt.step(&mut m, 1e-2, &cfg);
        let w = m.0.w.value.data();
        // bias-corrected first step is −lr·g/(|g|+ε)
        assert!((w[0] + 1e-2).abs() < 1e-9);
        assert!((w[1] - 1e-2).abs() < 1e-6);
        assert_eq!(w[2], 0.0);
    }
}
