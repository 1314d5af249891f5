use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization placement of a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    PreNorm,
    PostNorm,
    DeepNorm,
    SddPre,
    SddPost,
}

impl NormVariant {
    pub const ALL: [NormVariant; 5] = [
        NormVariant::PreNorm,
        NormVariant::PostNorm,
        NormVariant::DeepNorm,
        NormVariant::SddPre,
        NormVariant::SddPost,
    ];

    pub fn is_sdd(self) -> bool {
        matches!(self, NormVariant::SddPre | NormVariant::SddPost)
    }

    /// Norm after the residual sum (Post-Norm, DeepNorm, SDD on Post-Norm).
    pub fn is_post(self) -> bool {
        matches!(self, NormVariant::PostNorm | NormVariant::DeepNorm | NormVariant::SddPost)
    }

    pub fn label(self) -> &'static str {
        match self {
            NormVariant::PreNorm => "pre_norm",
            NormVariant::PostNorm => "post_norm",
            NormVariant::DeepNorm => "deep_norm",
            NormVariant::SddPre => "sdd_pre",
            NormVariant::SddPost => "sdd_post",
        }
    }

    pub fn parse(s: &str) -> Option<NormVariant> {
        let s = s.to_ascii_lowercase().replace('-', "_");
        NormVariant::ALL.into_iter().find(|v| v.label() == s || v.label().replace('_', "") == s)
    }

    /// Residual multiplier `(2L)^{1/4}` for DeepNorm, 1 otherwise.
    pub fn residual_scale(self, layers: usize) -> f64 {
        match self {
            NormVariant::DeepNorm => (2.0 * layers as f64).powf(0.25),
            _ => 1.0,
        }
    }

    /// DeepNorm init gain `(8L)^{-1/4}` for value, output and FFN projections.
    pub fn init_gain(self, layers: usize) -> f64 {
        match self {
            NormVariant::DeepNorm => (8.0 * layers as f64).powf(-0.25),
            _ => 1.0,
        }
    }
}

impl std::fmt::Display for NormVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub experts: usize,
    pub top_k: usize,
    pub aux_coeff: f64,
    /// Replace the router projection with an SDD layer as well.
    pub sdd_router: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            experts: 8,
            top_k: 2,
            aux_coeff: 0.01,
            sdd_router: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Number of key/value heads shared by groups of query heads.
    pub gqa_groups: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub context: usize,
    pub variant: NormVariant,
    pub moe: Option<MoeConfig>,
    pub init_seed: u64,
    /// Multiplies every initialization standard deviation.
    pub init_std_mult: f64,
    pub sdd_eps: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// 8 layers, d = 128, 8 heads in 2 groups, FFN 512, byte vocabulary.
    pub fn desk_dense(variant: NormVariant) -> Self {
        Self {
            layers: 8,
            d_model: 128,
            heads: 8,
            gqa_groups: 2,
            ffn_hidden: 512,
            vocab: 256,
            context: 256,
            variant,
            moe: None,
            init_seed: 0,
            init_std_mult: 1.0,
            sdd_eps: crate::layers::sdd::DEFAULT_EPS,
            norm_eps: 1e-6,
        }
    }

    /// d = 64 with 8 experts, two active per token.
    pub fn desk_moe(variant: NormVariant) -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 4,
            gqa_groups: 4,
            ffn_hidden: 64,
            moe: Some(MoeConfig::default()),
            ..Self::desk_dense(variant)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn kv_dim(&self) -> usize {
        self.gqa_groups * self.head_dim()
    }

    /// Output width of the fused `q | k | v` projection.
    pub fn qkv_dim(&self) -> usize {
        self.d_model + 2 * self.kv_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 || self.d_model == 0 || self.vocab == 0 || self.context == 0 || self.ffn_hidden == 0 {
            return bad("layers, d_model, ffn_hidden, vocab and context must be positive".into());
        }
        if self.heads == 0 || self.gqa_groups == 0 || !self.heads.is_multiple_of(self.gqa_groups) {
            return bad(format!("heads ({}) must be a multiple of gqa_groups ({})", self.heads, self.gqa_groups));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model ({}) must be divisible by heads ({})", self.d_model, self.heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dim {} must be even for rotary embedding", self.head_dim()));
        }
        if !(self.init_std_mult > 0.0) || !(self.sdd_eps >= 0.0) || !(self.norm_eps >= 0.0) {
            return bad("init_std_mult must be positive and eps values non-negative".into());
        }
        if let Some(m) = &self.moe {
            if m.experts == 0 || m.top_k == 0 || m.top_k > m.experts {
                return bad(format!("moe needs 1 <= top_k ({}) <= experts ({})", m.top_k, m.experts));
            }
            if !(m.aux_coeff >= 0.0) {
                return bad("moe aux_coeff must be non-negative".into());
            }
        }
        Ok(())
    }
}
