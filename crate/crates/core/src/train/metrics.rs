//! Per-step metrics as JSON lines.
//!
//! Fields: `step`, `loss` (cross-entropy, `null` if non-finite), `aux_loss`,
//! `ema_loss`, `val_loss` (on evaluation steps), `lr`, `grad_norm_global`
//! (before clipping), `clip_scale`, `per_layer_norms` (per layer:
//! `[att_proj, attn_out, ff_proj, ff_out]`), `alpha_min`, `alpha_max`
//! (`null` without SDD layers), `wallclock_ms`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(with = "nullable")]
    pub loss: f64,
    #[serde(with = "nullable")]
    pub aux_loss: f64,
    #[serde(with = "nullable")]
    pub ema_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    #[serde(with = "nullable")]
    pub grad_norm_global: f64,
    pub clip_scale: f64,
    pub per_layer_norms: Vec<[f64; 4]>,
    pub alpha_min: Option<f64>,
    pub alpha_max: Option<f64>,
    pub wallclock_ms: u64,
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::options().append(true).create(true).open(path)?),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidConfig(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_round_trips_as_null() {
        let rec = MetricsRecord {
            step: 3,
            loss: f64::NAN,
            aux_loss: 0.0,
            ema_loss: 1.5,
            val_loss: None,
            lr: 1e-4,
            grad_norm_global: f64::INFINITY,
            clip_scale: 1.0,
            per_layer_norms: vec![[1.0, 2.0, 3.0, 4.0]],
            alpha_min: Some(0.5),
            alpha_max: Some(1.0),
            wallclock_ms: 0,
        };
        let s = serde_json::to_string(&rec).unwrap();
        assert!(s.contains("\"loss\":null"));
        let back: MetricsRecord = serde_json::from_str(&s).unwrap();
        assert!(back.loss.is_nan() && back.grad_norm_global.is_nan());
        assert_eq!(back.per_layer_norms, rec.per_layer_norms);
    }
}
