//! The training loop: batch → forward → loss (+ balance loss) → backward →
//! clip → AdamW, one metrics record per step.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{config_digest, Checkpoint, ParamRecord};
use super::config::{lr_at, TrainConfig};
use super::data::Dataset;
use super::metrics::{read_metrics, MetricsRecord, MetricsWriter};
use super::optim::{clip_grads, AdamW};
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::{ModelConfig, TransformerModel};
use crate::tensor::{derive_seed, RngState};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";

/// Stream of the run seed used for batch sampling.
const DATA_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    /// Metrics records written (steps attempted).
    pub steps: usize,
    pub initial_loss: Option<f64>,
    /// Last finite training loss.
    pub final_loss: Option<f64>,
    pub final_ema_loss: Option<f64>,
    /// Validation loss after the last update (completed runs only).
    pub final_val_loss: Option<f64>,
    pub diverged_at: Option<usize>,
    pub config_digest: String,
}

pub struct StepOutcome {
    pub record: MetricsRecord,
    pub diverged: bool,
}

pub struct Trainer {
    pub model: TransformerModel<f32>,
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    opt: AdamW<f32>,
    rng: RngState,
    step: usize,
    initial_loss: Option<f64>,
    over_threshold: usize,
    ema: Option<f64>,
    started: Instant,
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::ZeroNorm { .. })
}

pub fn run_digest(model: &ModelConfig, train: &TrainConfig) -> Result<[u8; 32]> {
    config_digest(&(model, train))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Trainer {
    pub fn new(model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = TransformerModel::build(model_config)?;
        let opt = AdamW::new(&model);
        Ok(Self {
            model,
            model_config: model_config.clone(),
            config: config.clone(),
            opt,
            rng: RngState::new(derive_seed(config.seed, DATA_STREAM)),
            step: 0,
            initial_loss: None,
            over_threshold: 0,
            ema: None,
            started: Instant::now(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        run_digest(&self.model_config, &self.config)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut params = Vec::new();
        self.model.visit_params(&mut |p| {
            params.push(ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
        });
        Ok(Checkpoint {
            digest: self.digest()?,
            params,
            adam_t: self.opt.t,
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
            rng_seed: self.rng.seed(),
            rng_word_pos: self.rng.word_pos(),
            step: self.step as u64,
            initial_loss: self.initial_loss.unwrap_or(f64::NAN),
            over_threshold: self.over_threshold as u64,
            ema: self.ema.unwrap_or(f64::NAN),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        let mut t = Self::new(model_config, config)?;
        if ckpt.digest != t.digest()? {
            return Err(Error::Checkpoint("configuration digest differs from the checkpoint".into()));
        }
        let mut records = ckpt.params.iter();
        let mut failure = None;
        t.model.visit_params_mut(&mut |p| {
            match records.next() {
                Some(r) if r.name == p.name && r.shape == p.value.shape() => p.value.data_mut().copy_from_slice(&r.data),
                other => {
                    failure.get_or_insert(format!("expected parameter {}, found {:?}", p.name, other.map(|r| &r.name)));
                }
            };
        });
        if let Some(f) = failure {
            return Err(Error::Checkpoint(f));
        }
        if records.next().is_some() || ckpt.adam_m.len() != t.opt.m.len() {
            return Err(Error::Checkpoint("parameter count differs from the model".into()));
        }
        for (dst, src) in t.opt.m.iter_mut().zip(&ckpt.adam_m).chain(t.opt.v.iter_mut().zip(&ckpt.adam_v)) {
            if dst.len() != src.len() {
                return Err(Error::Checkpoint("optimizer buffer size differs from the model".into()));
            }
            dst.copy_from_slice(src);
        }
        t.opt.t = ckpt.adam_t;
        t.rng = RngState::restore(ckpt.rng_seed, ckpt.rng_word_pos);
        t.step = ckpt.step as usize;
        t.initial_loss = Some(ckpt.initial_loss).filter(|v| v.is_finite());
        t.over_threshold = ckpt.over_threshold as usize;
        t.ema = Some(ckpt.ema).filter(|v| v.is_finite());
        Ok(t)
    }

    /// Mean validation cross-entropy over the fixed validation batches.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        let batches = data.validation_batches(self.config.eval_batches.max(1), self.config.batch, self.config.seq_len);
        let mut total = 0.0;
        for b in &batches {
            match self.model.loss(&b.tokens, &b.targets, b.batch) {
                Ok(l) => total += l.ce,
                Err(e) if is_divergence(&e) => return Ok(f64::NAN),
                Err(e) => return Err(e),
            }
        }
        Ok(total / batches.len() as f64)
    }

    pub fn train_step(&mut self, data: &Dataset) -> Result<StepOutcome> {
        let cfg = &self.config;
        let k = self.step;
        let val_loss = if k.is_multiple_of(cfg.eval_every) { Some(self.evaluate(data)?) } else { None };
        let batch = data.sample_batch(cfg.batch, cfg.seq_len, &mut self.rng);
        self.model.zero_grad();
        let lr = lr_at(k, cfg);
        let (ce, aux, profile) = match self.model.loss_and_backward(&batch.tokens, &batch.targets, batch.batch) {
            Ok((l, p)) => (l.ce, l.aux, p.layers),
            Err(e) if is_divergence(&e) => (f64::NAN, f64::NAN, Vec::new()),
            Err(e) => return Err(e),
        };
        let (alpha_min, alpha_max) = self.model.alpha_range().unzip();
        let loss = ce + aux;
        let grad_norm = if loss.is_finite() { self.model.grad_norm() } else { f64::NAN };
        let mut diverged = !loss.is_finite();
        let mut clip_scale = 1.0;
        if !diverged {
            match clip_grads(&mut self.model, cfg.clip_norm) {
                Ok(s) => clip_scale = s,
                Err(e) if is_divergence(&e) => diverged = true,
                Err(e) => return Err(e),
            }
        }
        if !diverged {
            self.opt.step(&mut self.model, lr, cfg);
            let initial = *self.initial_loss.get_or_insert(loss);
            self.ema = Some(self.ema.map_or(loss, |e| cfg.ema_decay * e + (1.0 - cfg.ema_decay) * loss));
            if loss > cfg.divergence_factor * initial {
                self.over_threshold += 1;
            } else {
                self.over_threshold = 0;
            }
            diverged = self.over_threshold >= cfg.divergence_patience;
        }
        let record = MetricsRecord {
            step: k,
            loss: ce,
            aux_loss: aux,
            ema_loss: self.ema.unwrap_or(f64::NAN),
            val_loss: val_loss.filter(|v| v.is_finite()),
            lr,
            grad_norm_global: grad_norm,
            clip_scale,
            per_layer_norms: profile,
            alpha_min,
            alpha_max,
            wallclock_ms: if cfg.record_wallclock { self.started.elapsed().as_millis() as u64 } else { 0 },
        };
        self.step += 1;
        Ok(StepOutcome { record, diverged })
    }

    fn summary(&self, records: &[MetricsRecord], status: RunStatus, final_val: Option<f64>) -> Result<RunSummary> {
        let last_finite = records.iter().rev().find(|r| r.loss.is_finite());
        Ok(RunSummary {
            status,
            steps: records.len(),
            initial_loss: self.initial_loss,
            final_loss: last_finite.map(|r| r.loss + r.aux_loss),
            final_ema_loss: self.ema,
            final_val_loss: final_val,
            diverged_at: (status == RunStatus::Diverged).then(|| records.last().map_or(0, |r| r.step)),
            config_digest: hex(&self.digest()?),
        })
    }
}

pub struct RunPaths {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub summary: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            metrics: dir.join(METRICS_FILE),
            checkpoint: dir.join(CHECKPOINT_FILE),
            summary: dir.join(SUMMARY_FILE),
        }
    }
}

/// Trains to `total_steps` or divergence, writing metrics, checkpoints and a
/// summary into `out_dir`. With `resume`, a finished run with the same
/// configuration is returned as is, and a matching checkpoint is continued.
pub fn train(model_config: &ModelConfig, config: &TrainConfig, data: &Dataset, out_dir: &Path, resume: bool) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir)?;
    let paths = RunPaths::new(out_dir);
    let digest = hex(&run_digest(model_config, config)?);
    if resume {
        if let Ok(text) = std::fs::read_to_string(&paths.summary) {
            if let Ok(s) = serde_json::from_str::<RunSummary>(&text) {
                if s.config_digest == digest {
                    return Ok(s);
                }
            }
        }
    }
    let resumed = if resume && paths.checkpoint.exists() {
        let ckpt = Checkpoint::load(&paths.checkpoint)?;
        if hex(&ckpt.digest) == digest {
            Some(Trainer::from_checkpoint(&ckpt, model_config, config)?)
        } else {
            None
        }
    } else {
        None
    };
    let (mut trainer, mut records, mut writer) = match resumed {
        Some(t) => {
            let kept: Vec<MetricsRecord> = read_metrics(&paths.metrics)
                .unwrap_or_default()
                .into_iter()
                .filter(|r| r.step < t.step())
                .collect();
            let mut w = MetricsWriter::create(&paths.metrics)?;
            for r in &kept {
                w.write(r)?;
            }
            (t, kept, w)
        }
        None => {
            let _ = std::fs::remove_file(&paths.summary);
            (Trainer::new(model_config, config)?, Vec::new(), MetricsWriter::create(&paths.metrics)?)
        }
    };

    let mut status = RunStatus::Completed;
    while trainer.step() < config.total_steps {
        let out = trainer.train_step(data)?;
        writer.write(&out.record)?;
        records.push(out.record);
        if out.diverged {
            status = RunStatus::Diverged;
            break;
        }
        if trainer.step() % config.eval_every == 0 || trainer.step() == config.total_steps {
            writer.flush()?;
            trainer.checkpoint()?.save(&paths.checkpoint)?;
        }
    }
    writer.flush()?;
    let final_val = match status {
        RunStatus::Completed => Some(trainer.evaluate(data)?).filter(|v| v.is_finite()),
        RunStatus::Diverged => None,
    };
    let summary = trainer.summary(&records, status, final_val)?;
    std::fs::write(&paths.summary, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
