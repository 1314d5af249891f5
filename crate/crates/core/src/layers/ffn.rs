//! Gated feed-forward block `y = W₂ (silu(W_g x) ⊙ (W₁ x))`.
//!
//! `gate` and `up` together form the `ff_proj` group and `down` is `ff_out`.
//! Under SDD each of the three is an independent [`SddLinear`](super::SddLinear).

use super::{Module, Parameter, Projection, ProjectionCache};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SwiGlu<T: Scalar> {
    pub gate: Projection<T>,
    pub up: Projection<T>,
    pub down: Projection<T>,
}

#[derive(Clone, Debug)]
pub struct SwiGluCache<T: Scalar> {
    gate: ProjectionCache<T>,
    up: ProjectionCache<T>,
    down: ProjectionCache<T>,
    gate_pre: Tensor<T>,
    up_out: Tensor<T>,
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> SwiGlu<T> {
    pub fn new(gate: Projection<T>, up: Projection<T>, down: Projection<T>) -> Result<Self> {
        if gate.in_dim() != up.in_dim() || gate.out_dim() != up.out_dim() || down.in_dim() != gate.out_dim() {
            return Err(shape_err(
                "SwiGlu::new",
                "gate/up [h × d], down [d × h]",
                format!(
                    "gate [{}×{}], up [{}×{}], down [{}×{}]",
                    gate.out_dim(),
                    gate.in_dim(),
                    up.out_dim(),
                    up.in_dim(),
                    down.out_dim(),
                    down.in_dim()
                ),
            ));
        }
        Ok(Self { gate, up, down })
    }

    pub fn hidden(&self) -> usize {
        self.gate.out_dim()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SwiGluCache<T>)> {
        let (gate_pre, gate_cache) = self.gate.forward(x)?;
        let (up_out, up_cache) = self.up.forward(x)?;
        let act = Tensor::from_parts(
            gate_pre.shape().to_vec(),
            gate_pre
                .data()
                .iter()
                .zip(up_out.data())
                .map(|(&g, &u)| g * sigmoid(g) * u)
                .collect(),
        );
        let (y, down_cache) = self.down.forward(&act)?;
        Ok((
            y,
            SwiGluCache {
                gate: gate_cache,
                up: up_cache,
                down: down_cache,
                gate_pre,
                up_out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &SwiGluCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dact = self.down.backward(&cache.down, dy)?;
        let n = dact.len();
        let mut dgate = Vec::with_capacity(n);
        let mut dup = Vec::with_capacity(n);
        for ((&d, &g), &u) in dact.data().iter().zip(cache.gate_pre.data()).zip(cache.up_out.data()) {
            let s = sigmoid(g);
            let silu = g * s;
            let dsilu = s * (T::one() + g * (T::one() - s));
            dgate.push(d * u * dsilu);
            dup.push(d * silu);
        }
        let shape = dact.shape().to_vec();
        let dx_gate = self.gate.backward(&cache.gate, &Tensor::from_parts(shape.clone(), dgate))?;
        let mut dx = self.up.backward(&cache.up, &Tensor::from_parts(shape, dup))?;
        dx.add_assign(&dx_gate)?;
        dx.ensure_finite("SwiGlu::backward")?;
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for SwiGlu<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.gate.visit_params(f);
        self.up.visit_params(f);
        self.down.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.gate.visit_params_mut(f);
        self.up.visit_params_mut(f);
        self.down.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::StandardLinear;
    use crate::tensor::{gaussian, RngState};

    fn fc(name: &str, out: usize, inp: usize, rng: &mut RngState) -> Projection<f64> {
        Projection::Standard(StandardLinear::new(name, gaussian(&[out, inp], 0.0, 0.5, rng)))
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = RngState::new(1);
        let ffn = SwiGlu::new(fc("g", 8, 4, &mut rng), fc("u", 8, 4, &mut rng), fc("d", 4, 8, &mut rng)).unwrap();
        let (y, _) = ffn.forward(&Tensor::zeros(&[2, 4])).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn zero_gate_closes_block() {
        let mut rng = RngState::new(2);
        let gate = Projection::Standard(StandardLinear::new("g", Tensor::zeros(&[8, 4])));
        let ffn = SwiGlu::new(gate, fc("u", 8, 4, &mut rng), fc("d", 4, 8, &mut rng)).unwrap();
        let (y, _) = ffn.forward(&gaussian(&[3, 4], 0.0, 1.0, &mut rng)).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut rng = RngState::new(3);
        assert!(SwiGlu::new(fc("g", 8, 4, &mut rng), fc("u", 6, 4, &mut rng), fc("d", 4, 8, &mut rng)).is_err());
    }
}
