//! Ablation grids: variant × perturbation (robustness) and variant × depth.
//!
//! Each cell trains in its own directory under `cells/`, so an interrupted
//! sweep resumes from the per-cell checkpoints and finished cells are reused.

use std::path::Path;

use sdd_core::model::ModelConfig;
use sdd_core::train::{self, Dataset, RunStatus, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::{parse_variant, RunConfig};
use crate::error::{io_err, CliError, Result};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_MD: &str = "sweep.md";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_HEADER: &str = "variant,setting,status,final_loss,final_val_loss,diverged_at,metrics_path";
/// Marker for a diverged cell in the Markdown table.
pub const DIVERGED_MARK: &str = "−";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    None,
    LrX5,
    InitStdX01,
    NoWarmup,
}

impl Perturbation {
    pub const ALL: [Perturbation; 4] = [Perturbation::None, Perturbation::LrX5, Perturbation::InitStdX01, Perturbation::NoWarmup];

    pub fn label(self) -> &'static str {
        match self {
            Perturbation::None => "none",
            Perturbation::LrX5 => "lr_x5",
            Perturbation::InitStdX01 => "initstd_x0.1",
            Perturbation::NoWarmup => "no_warmup",
        }
    }

    pub fn parse(s: &str) -> Option<Perturbation> {
        Perturbation::ALL.into_iter().find(|p| p.label() == s)
    }

    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig) {
        match self {
            Perturbation::None => {}
            Perturbation::LrX5 => train.lr_mult *= 5.0,
            Perturbation::InitStdX01 => model.init_std_mult *= 0.1,
            Perturbation::NoWarmup => train.disable_warmup = true,
        }
    }
}

/// One grid cell to train.
#[derive(Clone, Debug)]
pub struct CellSpec {
    pub variant: String,
    /// Perturbation label or layer count.
    pub setting: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl CellSpec {
    pub fn dir_name(&self) -> String {
        format!("{}__{}", self.variant, self.setting)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub variant: String,
    pub setting: String,
    pub status: RunStatus,
    pub final_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub diverged_at: Option<usize>,
    /// Relative to the sweep output directory.
    pub metrics_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: String,
    pub variants: Vec<String>,
    pub settings: Vec<String>,
    pub cells: Vec<SweepCell>,
}

/// Expands the configured grid in row-major (variant, setting) order.
pub fn cell_specs(cfg: &RunConfig) -> Result<Vec<CellSpec>> {
    let base = cfg.model_config()?;
    let mut out = Vec::new();
    for v in &cfg.sweep.sweep_variants {
        let variant = parse_variant(v)?;
        let label = variant.label().to_string();
        if cfg.sweep.sweep_kind == "depth" {
            for &layers in &cfg.sweep.depths {
                let model = ModelConfig { variant, layers, ..base.clone() };
                model.validate()?;
                out.push(CellSpec {
                    variant: label.clone(),
                    setting: layers.to_string(),
                    model,
                    train: cfg.train.clone(),
                });
            }
        } else {
            for p in &cfg.sweep.perturbations {
                let pert = Perturbation::parse(p).ok_or_else(|| {
                    let valid: Vec<&str> = Perturbation::ALL.iter().map(|p| p.label()).collect();
                    CliError::Config(format!("unknown perturbation {p:?}; expected one of {}", valid.join(", ")))
                })?;
                let mut model = ModelConfig { variant, ..base.clone() };
                let mut train = cfg.train.clone();
                pert.apply(&mut model, &mut train);
                out.push(CellSpec {
                    variant: label.clone(),
                    setting: pert.label().to_string(),
                    model,
                    train,
                });
            }
        }
    }
    Ok(out)
}

pub fn run_cell(spec: &CellSpec, data: &Dataset, out_dir: &Path) -> Result<SweepCell> {
    let dir = out_dir.join("cells").join(spec.dir_name());
    let s = train::train(&spec.model, &spec.train, data, &dir, true)?;
    Ok(SweepCell {
        variant: spec.variant.clone(),
        setting: spec.setting.clone(),
        status: s.status,
        final_loss: s.final_ema_loss,
        final_val_loss: s.final_val_loss,
        diverged_at: s.diverged_at,
        metrics_path: format!("cells/{}/{}", spec.dir_name(), train::trainer::METRICS_FILE),
    })
}

/// Trains every cell; with `sweep_parallel` independent cells run concurrently.
pub fn run_sweep(cfg: &RunConfig, data: &Dataset, out_dir: &Path) -> Result<SweepResult> {
    let specs = cell_specs(cfg)?;
    let cells = if cfg.sweep.sweep_parallel {
        sdd_core::exec::map_indices(specs.len(), |i| run_cell(&specs[i], data, out_dir))
            .into_iter()
            .collect::<Result<Vec<_>>>()?
    } else {
        specs.iter().map(|s| run_cell(s, data, out_dir)).collect::<Result<Vec<_>>>()?
    };
    let mut variants: Vec<String> = Vec::new();
    let mut settings: Vec<String> = Vec::new();
    for s in &specs {
        if !variants.contains(&s.variant) {
            variants.push(s.variant.clone());
        }
        if !settings.contains(&s.setting) {
            settings.push(s.setting.clone());
        }
    }
    Ok(SweepResult {
        kind: cfg.sweep.sweep_kind.clone(),
        variants,
        settings,
        cells,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepResult {
    pub fn cell(&self, variant: &str, setting: &str) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.variant == variant && c.setting == setting)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for c in &self.cells {
            let status = match c.status {
                RunStatus::Completed => "completed",
                RunStatus::Diverged => "diverged",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.variant,
                c.setting,
                status,
                opt(c.final_loss),
                opt(c.final_val_loss),
                c.diverged_at.map(|s| s.to_string()).unwrap_or_default(),
                c.metrics_path
            ));
        }
        out
    }

    /// Variants as rows, settings as columns; final validation loss or the
    /// divergence mark.
    pub fn to_markdown(&self) -> String {
        let corner = if self.kind == "depth" { "variant \\ layers" } else { "variant" };
        let mut out = format!("# Sweep: {}\n\n| {corner} |", self.kind);
        for s in &self.settings {
            out.push_str(&format!(" {s} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.settings.len()));
        out.push('\n');
        for v in &self.variants {
            out.push_str(&format!("| {v} |"));
            for s in &self.settings {
                let text = match self.cell(v, s) {
                    Some(c) if c.status == RunStatus::Completed => c.final_val_loss.map_or("n/a".to_string(), |l| format!("{l:.4}")),
                    Some(_) => DIVERGED_MARK.to_string(),
                    None => String::new(),
                };
                out.push_str(&format!(" {text} |"));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "\nCells show the final validation loss; {DIVERGED_MARK} marks a diverged run.\n"
        ));
        out
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let write = |name: &str, text: String| {
            let path = out_dir.join(name);
            std::fs::write(&path, text).map_err(io_err(path))
        };
        write(SWEEP_CSV, self.to_csv())?;
        write(SWEEP_MD, self.to_markdown())?;
        let json = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        write(SWEEP_JSON, json + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse;

    #[test]
    fn robustness_grid_is_four_by_four() {
        let cfg = parse("", &[]).unwrap();
        let specs = cell_specs(&cfg).unwrap();
        assert_eq!(specs.len(), 16);
        let lr = specs.iter().find(|s| s.setting == "lr_x5").unwrap();
        assert_eq!(lr.train.effective_lr_peak(), 5.0 * cfg.train.lr_peak);
        let init = specs.iter().find(|s| s.setting == "initstd_x0.1").unwrap();
        assert!((init.model.init_std_mult - 0.1).abs() < 1e-15);
        assert!(specs.iter().find(|s| s.setting == "no_warmup").unwrap().train.disable_warmup);
    }

    #[test]
    fn depth_grid() {
        let cfg = parse("", &["sweep_kind=depth".into(), "sweep_variants=[\"sdd_post\", \"pre_norm\"]".into()]).unwrap();
        let specs = cell_specs(&cfg).unwrap();
        let layers: Vec<usize> = specs.iter().map(|s| s.model.layers).collect();
        assert_eq!(layers, vec![4, 8, 12, 16, 4, 8, 12, 16]);
    }

    #[test]
    fn markdown_marks_divergence() {
        let cell = |v: &str, s: &str, status| SweepCell {
            variant: v.into(),
            setting: s.into(),
            status,
            final_loss: Some(1.0),
            final_val_loss: (status == RunStatus::Completed).then_some(1.25),
            diverged_at: None,
            metrics_path: String::new(),
        };
        let r = SweepResult {
            kind: "robustness".into(),
            variants: vec!["post_norm".into()],
            settings: vec!["none".into(), "lr_x5".into()],
            cells: vec![cell("post_norm", "none", RunStatus::Completed), cell("post_norm", "lr_x5", RunStatus::Diverged)],
        };
        let md = r.to_markdown();
        assert!(md.contains("| post_norm | 1.2500 | − |"), "{md}");
        assert!(r.to_csv().lines().nth(2).unwrap().starts_with("post_norm,lr_x5,diverged,"));
    }
}
