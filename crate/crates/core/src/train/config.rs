use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub clip_norm: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Validation and checkpoint interval in steps.
    pub eval_every: usize,
    pub eval_batches: usize,
    /// Multiplies the whole learning-rate schedule.
    pub lr_mult: f64,
    pub disable_warmup: bool,
    /// A run diverges once loss exceeds `divergence_factor ×` the step-0 loss
    /// for `divergence_patience` consecutive steps (or turns non-finite).
    pub divergence_factor: f64,
    pub divergence_patience: usize,
    pub ema_decay: f64,
    /// Record real elapsed time; off by default so metrics are reproducible.
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            lr_min: 1.5e-5,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            warmup_steps: 200,
            total_steps: 2000,
            clip_norm: 1.0,
            batch: 2,
            seq_len: 32,
            seed: 0,
            eval_every: 200,
            eval_batches: 8,
            lr_mult: 1.0,
            disable_warmup: false,
            divergence_factor: 3.0,
            divergence_patience: 50,
            ema_decay: 0.98,
            record_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_peak) {
            return bad(format!("need 0 < lr_min ({}) <= lr_peak ({})", self.lr_min, self.lr_peak));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return bad(format!("need warmup_steps ({}) < total_steps ({})", self.warmup_steps, self.total_steps));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.batch == 0 || self.seq_len == 0 || self.eval_every == 0 {
            return bad("batch, seq_len and eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("need 0 <= beta1, beta2 < 1 and adam_eps > 0".into());
        }
        if !(self.lr_mult > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr_mult must be positive and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(self.divergence_factor > 1.0) || self.divergence_patience == 0 {
            return bad("need 0 <= ema_decay < 1, divergence_factor > 1, divergence_patience > 0".into());
        }
        Ok(())
    }

    pub fn effective_lr_peak(&self) -> f64 {
        self.lr_peak * self.lr_mult
    }

    pub fn effective_lr_min(&self) -> f64 {
        self.lr_min * self.lr_mult
    }

    pub fn effective_warmup(&self) -> usize {
        if self.disable_warmup {
            0
        } else {
            self.warmup_steps
        }
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to the minimum at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (peak, min) = (cfg.effective_lr_peak(), cfg.effective_lr_min());
    let warmup = cfg.effective_warmup();
    let step = step.min(cfg.total_steps);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = (cfg.total_steps - warmup).max(1) as f64;
    let t = (step - warmup) as f64 / span;
    min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * t).cos())
}
