//! RMS normalization with a learnable per-feature gain, used by the block
//! norms of the Pre-/Post-/DeepNorm wirings.

use super::{Module, ParamKind, Parameter};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::norm::{rms_eps, vjp_into};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RmsNorm<T: Scalar> {
    pub gain: Parameter<T>,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct RmsNormCache<T: Scalar> {
    x: Tensor<T>,
    normed: Tensor<T>,
    rms: Vec<T>,
}

impl<T: Scalar> RmsNorm<T> {
    pub fn new(name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gain: Parameter::new(format!("{name}.gain"), Tensor::full(&[dim], T::one()), ParamKind::Scale),
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.value.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, RmsNormCache<T>)> {
        let d = self.dim();
        if x.cols() != d {
            return Err(shape_err("RmsNorm::forward", d, x.cols()));
        }
        let eps = T::of(self.eps);
        let mut normed = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut rms = Vec::with_capacity(x.rows());
        let gain = self.gain.value.data();
        for r in 0..x.rows() {
            let s = rms_eps(x.row(r), eps);
            if s == T::zero() {
                return Err(Error::ZeroNorm { op: "RmsNorm::forward" });
            }
            let inv = T::one() / s;
            let (xr, nr) = (x.row(r), normed.row_mut(r));
            for (n, &v) in nr.iter_mut().zip(xr) {
                *n = v * inv;
            }
            for ((o, &n), &g) in y.row_mut(r).iter_mut().zip(normed.row(r)).zip(gain) {
                *o = n * g;
            }
            rms.push(s);
        }
        y.ensure_finite("RmsNorm::forward")?;
        Ok((y, RmsNormCache { x: x.clone(), normed, rms }))
    }

    pub fn backward(&mut self, cache: &RmsNormCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if dy.shape() != cache.x.shape() {
            return Err(shape_err("RmsNorm::backward", format!("{:?}", cache.x.shape()), format!("{:?}", dy.shape())));
        }
        let d = self.dim();
        let mut dgain = vec![T::zero(); d];
        let mut dx = Tensor::zeros(dy.shape());
        let mut g = vec![T::zero(); d];
        let gain = self.gain.value.data();
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            for ((dg, &dv), &n) in dgain.iter_mut().zip(dyr).zip(cache.normed.row(r)) {
                *dg = *dg + dv * n;
            }
            for ((gi, &dv), &w) in g.iter_mut().zip(dyr).zip(gain) {
                *gi = dv * w;
            }
            vjp_into(cache.x.row(r), &g, cache.rms[r], dx.row_mut(r));
        }
        self.gain.accumulate(&Tensor::new(vec![d], dgain)?)?;
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for RmsNorm<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.gain)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian, RngState};

    #[test]
    fn gain_gradient_and_input_gradient() {
        let mut rng = RngState::new(5);
        let mut norm = RmsNorm::<f64>::new("n", 6, 1e-6);
        norm.gain.value = gaussian(&[6], 1.0, 0.3, &mut rng);
        let x = gaussian(&[3, 6], 0.0, 2.0, &mut rng);
        let r = gaussian(&[3, 6], 0.0, 1.0, &mut rng);
        let loss = |n: &RmsNorm<f64>, x: &Tensor<f64>| n.forward(x).unwrap().0.hadamard(&r).unwrap().sum();
        let (_, cache) = norm.forward(&x).unwrap();
        let dx = norm.backward(&cache, &r).unwrap();
        let h = 1e-6;
        for j in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[j] += h;
            let mut m = x.clone();
            m.data_mut()[j] -= h;
            let fd = (loss(&norm, &p) - loss(&norm, &m)) / (2.0 * h);
            assert!((fd - dx.data()[j]).abs() < 1e-7);
        }
        for j in 0..6 {
            let mut p = norm.clone();
            p.gain.value.data_mut()[j] += h;
            let mut m = norm.clone();
            m.gain.value.data_mut()[j] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - norm.gain.grad.data()[j]).abs() < 1e-7);
        }
    }
}
