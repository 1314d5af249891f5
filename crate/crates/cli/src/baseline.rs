//! Verification baseline: the thresholds the acceptance run enforces and the
//! values measured by the reference oracles that fixed them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};
use crate::verify;

/// Repository-relative location of the baseline file.
pub const BASELINE_PATH: &str = "verification/baseline.json";

/// Allowed relative deviation of step-0 loss from `ln 256`.
pub const INITIAL_LOSS_REL_TOL: f64 = 0.10;
/// Final training loss bound for a completed desk-scale SDD run.
pub const FINAL_LOSS_MAX: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub equivalence_max_median: f64,
    pub equivalence_at_n: usize,
    pub preservation_band: (f64, f64),
    pub preservation_min_fraction: f64,
    pub fc_ratio_tol: f64,
    pub initial_loss_rel_tol: f64,
    pub final_loss_max: f64,
}

impl Thresholds {
    pub fn current() -> Self {
        Self {
            equivalence_max_median: verify::EQUIVALENCE_MAX_MEDIAN,
            equivalence_at_n: verify::EQUIVALENCE_AT_N,
            preservation_band: verify::PRESERVATION_BAND,
            preservation_min_fraction: verify::PRESERVATION_MIN_FRACTION,
            fc_ratio_tol: verify::FC_RATIO_TOL,
            initial_loss_rel_tol: INITIAL_LOSS_REL_TOL,
            final_loss_max: FINAL_LOSS_MAX,
        }
    }
}

/// Outcome of one desk-scale training cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub variant: String,
    pub setting: String,
    pub status: String,
    pub initial_loss: Option<f64>,
    pub final_ema_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    /// `(n, median)` per size.
    pub forward_median: Vec<(usize, f64)>,
    pub reverse_median: Vec<(usize, f64)>,
    pub preservation_fraction: f64,
    pub fc_ratio: f64,
    pub training: Vec<TrainingRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub thresholds: Thresholds,
    pub measured: Measured,
}

impl Baseline {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))? + "\n";
        std::fs::write(path, text).map_err(io_err(path))
    }
}

/// `|a − b| ≤ rel · max(|a|, |b|)`, treating two `None`s as equal.
pub fn close(a: Option<f64>, b: Option<f64>, rel: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= rel * a.abs().max(b.abs()),
        (None, None) => true,
        _ => false,
    }
}
