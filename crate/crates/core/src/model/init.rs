//! Initialization recipes.
//!
//! * Pre/Post-Norm: truncated normal (±3σ) with σ = 0.02, output projections
//!   (`attn_out`, `ff_out`) scaled by `1/√(2L)`.
//! * DeepNorm: Xavier normal; the value slice of `att_proj`, `attn_out` and
//!   the FFN projections carry gain `(8L)^{-1/4}`.
//! * SDD: `V ~ N(0, σ²)` with `σ = 1/√(2.5·d_model)`; `α = 1/√L` on `attn_out`
//!   and `ff_out`, 1 elsewhere.
//!
//! Embedding and unembedding always use the baseline truncated normal, and
//! every standard deviation is multiplied by `init_std_mult`.

use super::config::{ModelConfig, NormVariant};
use crate::error::Result;
use crate::layers::{Projection, SddLinear, StandardLinear};
use crate::scalar::Scalar;
use crate::tensor::{gaussian, truncated_gaussian, RngState, Tensor};

pub const BASE_STD: f64 = 0.02;
pub const TRUNCATION: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Qkv,
    AttnOut,
    FfIn,
    FfOut,
    Router,
}

impl Role {
    fn is_output(self) -> bool {
        matches!(self, Role::AttnOut | Role::FfOut)
    }
}

/// `1/√(2.5·d_model)`.
pub fn sdd_v_std(d_model: usize) -> f64 {
    1.0 / (2.5 * d_model as f64).sqrt()
}

/// `1/√L` on output projections, 1 elsewhere.
pub fn sdd_alpha_init(role: Role, layers: usize) -> f64 {
    if role.is_output() {
        1.0 / (layers as f64).sqrt()
    } else {
        1.0
    }
}

pub(crate) struct Initializer<'a> {
    cfg: &'a ModelConfig,
    rng: RngState,
}

impl<'a> Initializer<'a> {
    pub fn new(cfg: &'a ModelConfig) -> Self {
        Self {
            cfg,
            rng: RngState::new(cfg.init_seed),
        }
    }

    fn mult(&self) -> f64 {
        self.cfg.init_std_mult
    }

    pub fn table<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        truncated_gaussian(&[rows, cols], BASE_STD * self.mult(), TRUNCATION, &mut self.rng)
    }

    fn xavier<T: Scalar>(&mut self, out: usize, inn: usize, gain: f64) -> Tensor<T> {
        let std = gain * (2.0 / (out + inn) as f64).sqrt() * self.mult();
        gaussian(&[out, inn], 0.0, std, &mut self.rng)
    }

    fn deepnorm_weight<T: Scalar>(&mut self, out: usize, inn: usize, role: Role) -> Result<Tensor<T>> {
        let beta = self.cfg.variant.init_gain(self.cfg.layers);
        match role {
            Role::Qkv => {
                let (d, kv) = (self.cfg.d_model, self.cfg.kv_dim());
                let q = self.xavier::<T>(d, inn, 1.0);
                let k = self.xavier::<T>(kv, inn, 1.0);
                let v = self.xavier::<T>(kv, inn, beta);
                let mut data = q.into_data();
                data.extend(k.into_data());
                data.extend(v.into_data());
                Tensor::new(vec![out, inn], data)
            }
            Role::Router => Ok(self.xavier(out, inn, 1.0)),
            _ => Ok(self.xavier(out, inn, beta)),
        }
    }

    pub fn projection<T: Scalar>(&mut self, name: &str, out: usize, inn: usize, role: Role) -> Result<Projection<T>> {
        let cfg = self.cfg;
        let sdd = match role {
            Role::Router => cfg.variant.is_sdd() && cfg.moe.as_ref().is_some_and(|m| m.sdd_router),
            _ => cfg.variant.is_sdd(),
        };
        if sdd {
            let v = gaussian(&[out, inn], 0.0, sdd_v_std(cfg.d_model) * self.mult(), &mut self.rng);
            let alpha = sdd_alpha_init(role, cfg.layers);
            return Ok(Projection::Sdd(SddLinear::with_constant_alpha(name, v, alpha, cfg.sdd_eps)?));
        }
        let w = match cfg.variant {
            NormVariant::DeepNorm => self.deepnorm_weight(out, inn, role)?,
            _ => {
                let std = if role.is_output() {
                    BASE_STD / (2.0 * cfg.layers as f64).sqrt()
                } else {
                    BASE_STD
                };
                truncated_gaussian(&[out, inn], std * self.mult(), TRUNCATION, &mut self.rng)
            }
        };
        Ok(Projection::Standard(StandardLinear::new(name, w)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sdd_constants() {
        assert!((sdd_v_std(2048) - 0.013975424859373685).abs() < 1e-15);
        assert_eq!(sdd_alpha_init(Role::FfOut, 16), 0.25);
        assert_eq!(sdd_alpha_init(Role::Qkv, 16), 1.0);
    }
}
