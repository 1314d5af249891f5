//! Closed-form parameter counts and the extra cost of SDD layers.
//!
//! Normalizing a `B·S × H` activation costs about `6·B·S·H` FLOPs per layer
//! application (squares, mean, reciprocal root, scale, and the `α` product,
//! forward and backward together), and `α` adds one parameter per output.

use serde::Serialize;

use super::config::ModelConfig;

/// `6·B·S·H`.
pub fn sdd_extra_flops(batch: u64, seq: u64, hidden: u64) -> u64 {
    6 * batch * seq * hidden
}

fn proj(out: usize, inn: usize, sdd: bool) -> u64 {
    (out * inn + if sdd { out } else { 0 }) as u64
}

fn router_is_sdd(cfg: &ModelConfig) -> bool {
    cfg.variant.is_sdd() && cfg.moe.as_ref().is_some_and(|m| m.sdd_router)
}

/// Exact number of trainable scalars in `TransformerModel::build(cfg)`.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let (d, h, sdd) = (cfg.d_model, cfg.ffn_hidden, cfg.variant.is_sdd());
    let ffn = 2 * proj(h, d, sdd) + proj(d, h, sdd);
    let ffn_total = match &cfg.moe {
        None => ffn,
        Some(m) => proj(m.experts, d, router_is_sdd(cfg)) + m.experts as u64 * ffn,
    };
    let block = 2 * d as u64 + proj(cfg.qkv_dim(), d, sdd) + proj(d, d, sdd) + ffn_total;
    let final_norm = if cfg.variant.is_post() { 0 } else { d as u64 };
    2 * (cfg.vocab * d) as u64 + cfg.layers as u64 * block + final_norm
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadReport {
    pub batch: u64,
    pub seq: u64,
    /// `H`, the model width.
    pub hidden: u64,
    /// `6·B·S·H` for one SDD layer applied to the whole batch.
    pub flops_per_application: u64,
    /// SDD layer instances in the model.
    pub sdd_layers: u64,
    /// SDD layer applications per forward/backward over `B·S` tokens
    /// (an MoE token visits `top_k` experts).
    pub applications: u64,
    pub total_extra_flops: u64,
    /// Parameters added by `α` vectors (one per SDD output feature).
    pub alpha_params: u64,
    pub total_params: u64,
}

pub fn flops_overhead(cfg: &ModelConfig, batch: u64, seq: u64) -> OverheadReport {
    let (d, h, l) = (cfg.d_model as u64, cfg.ffn_hidden as u64, cfg.layers as u64);
    let hidden = d;
    let per = sdd_extra_flops(batch, seq, hidden);
    let (mut layers, mut applications, mut alpha) = (0u64, 0u64, 0u64);
    if cfg.variant.is_sdd() {
        let attn_alpha = cfg.qkv_dim() as u64 + d;
        let ffn_alpha = 2 * h + d;
        match &cfg.moe {
            None => {
                layers = l * 5;
                applications = l * 5;
                alpha = l * (attn_alpha + ffn_alpha);
            }
            Some(m) => {
                let router = u64::from(router_is_sdd(cfg));
                let e = m.experts as u64;
                layers = l * (2 + 3 * e + router);
                applications = l * (2 + 3 * m.top_k as u64 + router);
                alpha = l * (attn_alpha + e * ffn_alpha + router * e);
            }
        }
    }
    OverheadReport {
        batch,
        seq,
        hidden,
        flops_per_application: per,
        sdd_layers: layers,
        applications,
        total_extra_flops: applications * per,
        alpha_params: alpha,
        total_params: param_count(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NormVariant;

    #[test]
    fn six_bsh() {
        assert_eq!(sdd_extra_flops(1, 4096, 2048), 50_331_648);
    }

    #[test]
    fn baselines_have_no_overhead() {
        for v in [NormVariant::PreNorm, NormVariant::PostNorm, NormVariant::DeepNorm] {
            let r = flops_overhead(&ModelConfig::desk_dense(v), 4, 64);
            assert_eq!((r.sdd_layers, r.total_extra_flops, r.alpha_params), (0, 0, 0));
        }
    }

    #[test]
    fn alpha_is_the_count_difference() {
        let sdd = ModelConfig::desk_dense(NormVariant::SddPost);
        let base = ModelConfig::desk_dense(NormVariant::PostNorm);
        assert_eq!(param_count(&sdd) - param_count(&base), flops_overhead(&sdd, 1, 1).alpha_params);
    }
}
