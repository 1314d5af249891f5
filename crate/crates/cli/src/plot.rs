//! Renders metrics JSONL and result CSVs into SVG files.
//!
//! All inputs are parsed before anything is written, so a malformed or empty
//! input leaves the output directory untouched.

use std::path::{Path, PathBuf};

use sdd_core::theory::CSV_HEADER;
use sdd_core::train::read_metrics;

use crate::error::{io_err, CliError, Result};
use crate::probe::GRADNORM_HEADER;
use crate::svg::{heatmap, line_chart, Series};
use crate::sweep::SWEEP_HEADER;

pub const LOSS_SVG: &str = "loss.svg";

fn input_err(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Input {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Name of a run: the parent directory for `metrics.jsonl`, else the stem.
fn run_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
        Some(dir) if stem == "metrics" => dir.to_string(),
        _ => stem.to_string(),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot").to_string()
}

fn num(path: &Path, s: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| input_err(path, format!("not a number: {s:?}")))
}

struct Csv {
    header: String,
    rows: Vec<Vec<String>>,
}

fn read_csv(path: &Path) -> Result<Csv> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| input_err(path, "empty file"))?.to_string();
    let width = header.split(',').count();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    if rows.is_empty() {
        return Err(input_err(path, "no data rows"));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(input_err(path, format!("row has {} fields, header has {width}", r.len())));
    }
    Ok(Csv { header, rows })
}

/// Groups rows by the value in column `key`, keeping first-seen order.
fn grouped(rows: &[Vec<String>], key: usize) -> Vec<(String, Vec<&Vec<String>>)> {
    let mut out: Vec<(String, Vec<&Vec<String>>)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(k, _)| *k == r[key]) {
            Some((_, v)) => v.push(r),
            None => out.push((r[key].clone(), vec![r])),
        }
    }
    out
}

fn render_csv(path: &Path) -> Result<String> {
    let csv = read_csv(path)?;
    let name = stem(path);
    if csv.header.starts_with("layer,0") {
        let matrix = csv
            .rows
            .iter()
            .map(|r| r[1..].iter().map(|v| num(path, v)).collect::<Result<Vec<f64>>>())
            .collect::<Result<Vec<_>>>()?;
        if matrix.iter().any(|r| r.len() != matrix.len()) {
            return Err(input_err(path, "similarity matrix is not square"));
        }
        return Ok(heatmap(&name, &matrix));
    }
    if csv.header == GRADNORM_HEADER {
        let series = grouped(&csv.rows, 1)
            .into_iter()
            .map(|(group, rows)| {
                let points = rows.iter().map(|r| Ok((num(path, &r[0])?, num(path, &r[2])?))).collect::<Result<Vec<_>>>()?;
                Ok(Series { name: group, points })
            })
            .collect::<Result<Vec<_>>>()?;
        let positive = series.iter().flat_map(|s| &s.points).all(|p| p.1 > 0.0);
        return Ok(line_chart(&name, "layer", "gradient norm", &series, positive));
    }
    if csv.header == CSV_HEADER {
        let series = grouped(&csv.rows, 0)
            .into_iter()
            .map(|(exp, rows)| {
                let points = rows.iter().map(|r| Ok((num(path, &r[1])?, num(path, &r[4])?))).collect::<Result<Vec<_>>>()?;
                Ok(Series { name: exp, points })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(line_chart(&name, "n", "median", &series, false));
    }
    if csv.header == SWEEP_HEADER {
        let numeric = csv.rows.iter().all(|r| r[1].parse::<f64>().is_ok());
        let settings: Vec<String> = grouped(&csv.rows, 1).into_iter().map(|(s, _)| s).collect();
        let series = grouped(&csv.rows, 0)
            .into_iter()
            .map(|(variant, rows)| {
                let points = rows
                    .iter()
                    .map(|r| {
                        let x = if numeric {
                            num(path, &r[1])?
                        } else {
                            settings.iter().position(|s| *s == r[1]).unwrap_or(0) as f64
                        };
                        Ok((x, num(path, &r[4])?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Series { name: variant, points })
            })
            .collect::<Result<Vec<_>>>()?;
        let x_label = if numeric {
            "layers".to_string()
        } else {
            settings.iter().enumerate().map(|(i, s)| format!("{i}={s}")).collect::<Vec<_>>().join(" ")
        };
        return Ok(line_chart(&name, &x_label, "final validation loss", &series, false));
    }
    Err(input_err(path, format!("unrecognized CSV header {:?}", csv.header)))
}

/// Writes one SVG per CSV input and one `loss.svg` for all JSONL inputs.
pub fn plot(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(CliError::Usage("plot needs at least one --input".into()));
    }
    let mut rendered: Vec<(PathBuf, String)> = Vec::new();
    let mut runs: Vec<Series> = Vec::new();
    for path in inputs {
        if path.extension().is_some_and(|e| e == "jsonl") {
            if !path.exists() {
                return Err(input_err(path, "file not found"));
            }
            let records = read_metrics(path).map_err(|e| input_err(path, e.to_string()))?;
            if records.is_empty() {
                return Err(input_err(path, "no metrics records"));
            }
            runs.push(Series {
                name: run_name(path),
                points: records.iter().map(|r| (r.step as f64, r.ema_loss)).collect(),
            });
        } else {
            rendered.push((out_dir.join(format!("{}.svg", stem(path))), render_csv(path)?));
        }
    }
    if !runs.is_empty() {
        rendered.push((out_dir.join(LOSS_SVG), line_chart("training loss (EMA)", "step", "loss", &runs, false)));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for (path, svg) in &rendered {
        std::fs::write(path, svg).map_err(io_err(path))?;
    }
    Ok(rendered.into_iter().map(|(p, _)| p).collect())
}
