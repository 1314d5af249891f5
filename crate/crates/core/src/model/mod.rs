//! Byte-level decoder-only transformers in five normalization variants.

pub mod block;
pub mod config;
pub mod init;
pub mod moe;
pub mod overhead;

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::layers::gradcheck::FnOracle;
use crate::layers::{Attention, Module, ParamKind, Parameter, Projection, ProjectionCache, RmsNorm, RmsNormCache, StandardLinear, SwiGlu};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use block::{Block, BlockCache, FeedForward};
pub use config::{ModelConfig, MoeConfig, NormVariant};
pub use init::Role;
pub use moe::{MoeCache, MoeLayer};
pub use overhead::{flops_overhead, param_count, sdd_extra_flops, OverheadReport};

/// Names of the four projection groups tracked per layer.
pub const GROUPS: [&str; 4] = ["att_proj", "attn_out", "ff_proj", "ff_out"];

#[derive(Clone, Debug)]
pub struct TransformerModel<T: Scalar> {
    pub config: ModelConfig,
    pub embed: Parameter<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Option<RmsNorm<T>>,
    pub unembed: Projection<T>,
}

#[derive(Clone, Debug)]
struct ModelCache<T: Scalar> {
    tokens: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
    final_norm: Option<RmsNormCache<T>>,
    unembed: ProjectionCache<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass<T: Scalar> {
    /// `[batch·seq × vocab]`, sequences stored contiguously.
    pub logits: Tensor<T>,
    /// Post-block hidden state of every layer, when captured.
    pub hidden: Option<Vec<Tensor<T>>>,
    /// Summed MoE balance loss over layers (0 for dense models).
    pub aux_loss: f64,
    pub batch: usize,
    pub seq: usize,
    caches: Option<ModelCache<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    /// Frees activation caches; a later `backward` reports [`Error::MissingCaches`].
    pub fn discard_caches(&mut self) {
        self.caches = None;
    }

    pub fn has_caches(&self) -> bool {
        self.caches.is_some()
    }
}

/// L2 norms of the weight-matrix gradients of each projection group, per layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradNormProfile {
    pub layers: Vec<[f64; 4]>,
}

impl GradNormProfile {
    /// `(layer, group, norm)` rows, `4·L` in total.
    pub fn entries(&self) -> Vec<(usize, &'static str, f64)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, row)| GROUPS.iter().zip(row).map(move |(g, &v)| (l, *g, v)))
            .collect()
    }

    pub fn group(&self, group: usize) -> Vec<f64> {
        self.layers.iter().map(|r| r[group]).collect()
    }

    /// max/min of one group's per-layer norms.
    pub fn spread(&self, group: usize) -> f64 {
        let v = self.group(group);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        max / min
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub ce: f64,
    pub aux: f64,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.ce + self.aux
    }
}

fn grad_sq<T: Scalar>(p: &Parameter<T>) -> f64 {
    p.grad.data().iter().map(|g| g.as_f64() * g.as_f64()).sum()
}

impl<T: Scalar> TransformerModel<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let mut init = init::Initializer::new(cfg);
        let d = cfg.d_model;
        let embed = Parameter::new("embed.weight", init.table(cfg.vocab, d), ParamKind::Embedding);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("blocks.{l}");
            let att_proj = init.projection(&format!("{p}.attn.att_proj"), cfg.qkv_dim(), d, Role::Qkv)?;
            let attn_out = init.projection(&format!("{p}.attn.attn_out"), d, d, Role::AttnOut)?;
            let attn = Attention::new(att_proj, attn_out, cfg.heads, cfg.gqa_groups, cfg.context)?;
            let ffn_at = |prefix: &str, init: &mut init::Initializer| -> Result<SwiGlu<T>> {
                SwiGlu::new(
                    init.projection(&format!("{prefix}.ff_proj.gate"), cfg.ffn_hidden, d, Role::FfIn)?,
                    init.projection(&format!("{prefix}.ff_proj.up"), cfg.ffn_hidden, d, Role::FfIn)?,
                    init.projection(&format!("{prefix}.ff_out"), d, cfg.ffn_hidden, Role::FfOut)?,
                )
            };
            let ffn = match &cfg.moe {
                None => FeedForward::Dense(ffn_at(&format!("{p}.ffn"), &mut init)?),
                Some(m) => {
                    let router = init.projection(&format!("{p}.ffn.router"), m.experts, d, Role::Router)?;
                    let experts = (0..m.experts)
                        .map(|e| ffn_at(&format!("{p}.ffn.experts.{e}"), &mut init))
                        .collect::<Result<Vec<_>>>()?;
                    FeedForward::Moe(MoeLayer::new(router, experts, m.top_k, m.aux_coeff)?)
                }
            };
            blocks.push(Block {
                attn_norm: RmsNorm::new(&format!("{p}.attn_norm"), d, cfg.norm_eps),
                attn,
                ff_norm: RmsNorm::new(&format!("{p}.ff_norm"), d, cfg.norm_eps),
                ffn,
                post_norm: cfg.variant.is_post(),
                residual_scale: cfg.variant.residual_scale(cfg.layers),
            });
        }
        let final_norm = (!cfg.variant.is_post()).then(|| RmsNorm::new("final_norm", d, cfg.norm_eps));
        let unembed = Projection::Standard(StandardLinear::new("unembed", init.table(cfg.vocab, d)));
        Ok(Self {
            config: cfg.clone(),
            embed,
            blocks,
            final_norm,
            unembed,
        })
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(shape_err("TransformerModel::forward", format!("batch ({batch}) dividing token count"), tokens.len()));
        }
        let seq = tokens.len() / batch;
        if seq > self.config.context {
            return Err(Error::SequenceTooLong {
                len: seq,
                context: self.config.context,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab,
            });
        }
        Ok(seq)
    }

    /// `tokens` holds `batch` sequences back to back. Activation caches are
    /// retained for [`backward`](Self::backward).
    pub fn forward(&self, tokens: &[usize], batch: usize, capture: bool) -> Result<ForwardPass<T>> {
        let seq = self.check_tokens(tokens, batch)?;
        let d = self.config.d_model;
        let mut x = Tensor::zeros(&[tokens.len(), d]);
        for (r, &t) in tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.embed.value.row(t));
        }
        let mut hidden = capture.then(|| Vec::with_capacity(self.blocks.len()));
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut aux_loss = 0.0;
        for block in &self.blocks {
            let (y, aux, cache) = block.forward(&x, seq)?;
            aux_loss += aux;
            caches.push(cache);
            if let Some(h) = hidden.as_mut() {
                h.push(y.clone());
            }
            x = y;
        }
        let (x, final_cache) = match &self.final_norm {
            Some(n) => {
                let (y, c) = n.forward(&x)?;
                (y, Some(c))
            }
            None => (x, None),
        };
        let (logits, unembed) = self.unembed.forward(&x)?;
        logits.ensure_finite("TransformerModel::forward")?;
        Ok(ForwardPass {
            logits,
            hidden,
            aux_loss,
            batch,
            seq,
            caches: Some(ModelCache {
                tokens: tokens.to_vec(),
                blocks: caches,
                final_norm: final_cache,
                unembed,
            }),
        })
    }

    /// Accumulates exact gradients of `Σ dlogits⊙logits + aux_loss`.
    pub fn backward(&mut self, pass: &ForwardPass<T>, dlogits: &Tensor<T>) -> Result<GradNormProfile> {
        self.backward_weighted(pass, dlogits, 1.0)
    }

    /// As [`backward`](Self::backward) with `∂L/∂aux_loss = aux_weight`.
    pub fn backward_weighted(&mut self, pass: &ForwardPass<T>, dlogits: &Tensor<T>, aux_weight: f64) -> Result<GradNormProfile> {
        let caches = pass.caches.as_ref().ok_or(Error::MissingCaches)?;
        if dlogits.shape() != pass.logits.shape() {
            return Err(shape_err("TransformerModel::backward", format!("{:?}", pass.logits.shape()), format!("{:?}", dlogits.shape())));
        }
        let mut dx = self.unembed.backward(&caches.unembed, dlogits)?;
        if let (Some(n), Some(c)) = (self.final_norm.as_mut(), caches.final_norm.as_ref()) {
            dx = n.backward(c, &dx)?;
        }
        for (block, cache) in self.blocks.iter_mut().zip(&caches.blocks).rev() {
            dx = block.backward(cache, &dx, aux_weight)?;
        }
        let d = self.config.d_model;
        let mut dembed = Tensor::zeros(self.embed.value.shape());
        for (r, &t) in caches.tokens.iter().enumerate() {
            for (o, &g) in dembed.row_mut(t).iter_mut().zip(dx.row(r)) {
                *o = *o + g;
            }
        }
        debug_assert_eq!(dembed.cols(), d);
        self.embed.accumulate(&dembed)?;
        Ok(self.grad_norm_profile())
    }

    /// Current gradient norms of the four projection groups per layer; experts
    /// of an MoE layer are pooled into one norm per group.
    pub fn grad_norm_profile(&self) -> GradNormProfile {
        let layers = self
            .blocks
            .iter()
            .map(|b| {
                let mut sq = [0.0; 4];
                sq[0] = grad_sq(b.attn.att_proj.weight());
                sq[1] = grad_sq(b.attn.attn_out.weight());
                for e in b.ffn.experts() {
                    sq[2] += grad_sq(e.gate.weight()) + grad_sq(e.up.weight());
                    sq[3] += grad_sq(e.down.weight());
                }
                sq.map(f64::sqrt)
            })
            .collect();
        GradNormProfile { layers }
    }

    /// Cross-entropy (mean over tokens) plus balance loss, with gradients accumulated.
    pub fn loss_and_backward(&mut self, tokens: &[usize], targets: &[usize], batch: usize) -> Result<(StepLoss, GradNormProfile)> {
        let pass = self.forward(tokens, batch, false)?;
        let (ce, dlogits) = crate::layers::cross_entropy(&pass.logits, targets)?;
        let profile = self.backward(&pass, &dlogits)?;
        Ok((StepLoss { ce, aux: pass.aux_loss }, profile))
    }

    /// Evaluation loss without gradients.
    pub fn loss(&self, tokens: &[usize], targets: &[usize], batch: usize) -> Result<StepLoss> {
        let pass = self.forward(tokens, batch, false)?;
        let (ce, _) = crate::layers::cross_entropy(&pass.logits, targets)?;
        Ok(StepLoss { ce, aux: pass.aux_loss })
    }

    /// Range of every SDD `α` entry, `None` for models without SDD layers.
    pub fn alpha_range(&self) -> Option<(f64, f64)> {
        let mut range: Option<(f64, f64)> = None;
        self.visit_params(&mut |p| {
            if p.kind == ParamKind::Scale && p.name.ends_with(".alpha") {
                for v in p.value.data() {
                    let v = v.as_f64();
                    range = Some(range.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v))));
                }
            }
        });
        range
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        let mut found = None;
        self.visit_params(&mut |p| {
            if found.is_none() && p.name == name {
                found = Some(p);
            }
        });
        found
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.visit_params(&mut |p| sq += grad_sq(p));
        sq.sqrt()
    }

    /// All parameter values in visiting order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend(p.value.data().iter().map(|v| v.as_f64())));
        out
    }

    pub fn set_flat_values(&mut self, theta: &[f64]) {
        let mut it = theta.iter();
        self.visit_params_mut(&mut |p| {
            for v in p.value.data_mut() {
                *v = T::of(*it.next().expect("theta shorter than parameter count"));
            }
        });
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend(p.grad.data().iter().map(|v| v.as_f64())));
        out
    }

    /// Converts parameters (values only) to another precision.
    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        // Rebuilding gives the same structure; values are then copied.
        let mut out = TransformerModel::<U>::build(&self.config).expect("config already validated");
        let mut values = Vec::new();
        self.visit_params(&mut |p| values.push(p.value.cast::<U>()));
        let mut it = values.into_iter();
        out.visit_params_mut(&mut |p| p.value = it.next().expect("same parameter layout"));
        out
    }
}

/// Mean cross-entropy plus balance loss as a function of every parameter,
/// for finite-difference checking of the whole model.
pub fn model_oracle(model: TransformerModel<f64>, tokens: Vec<usize>, targets: Vec<usize>, batch: usize) -> FnOracle {
    let point = model.flat_values();
    let name = format!("model_{}", model.config.variant);
    let eval = model.clone();
    let grad_model = std::sync::Mutex::new(model);
    let (t1, y1) = (tokens.clone(), targets.clone());
    FnOracle {
        name,
        point,
        loss: Box::new(move |theta| {
            let mut m = eval.clone();
            m.set_flat_values(theta);
            m.loss(&t1, &y1, batch).ok().map(|l| l.total())
        }),
        grad: Box::new(move |theta| {
            let mut m = grad_model.lock().ok()?;
            m.set_flat_values(theta);
            m.zero_grad();
            m.loss_and_backward(&tokens, &targets, batch).ok()?;
            Some(m.flat_grads())
        }),
    }
}

impl<T: Scalar> Module<T> for TransformerModel<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        f(&self.embed);
        for b in &self.blocks {
            b.visit_params(f);
        }
        if let Some(n) = &self.final_norm {
            n.visit_params(f);
        }
        self.unembed.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.embed);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        if let Some(n) = &mut self.final_norm {
            n.visit_params_mut(f);
        }
        self.unembed.visit_params_mut(f);
    }
}
