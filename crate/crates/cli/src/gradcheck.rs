//! Finite-difference and dual-derivation gradient checks over the layer suite.

use std::path::Path;

use sdd_core::layers::gradcheck::{run_suite, sdd_dual_derivation_error, CheckReport, GradCheckOptions, LayerKind};
use sdd_core::RngState;
use serde::Serialize;

use crate::config::GradcheckSection;
use crate::error::{io_err, CliError, Result};

pub const REPORT_JSON: &str = "gradcheck.json";
pub const REPORT_CSV: &str = "gradcheck.csv";
pub const DUAL_CSV: &str = "dual_derivation.csv";
pub const COORDS_CSV: &str = "gradcheck_coordinates.csv";
/// Seed stream of the dual-derivation instances.
const DUAL_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, Serialize)]
pub struct FdResult {
    pub layer: String,
    pub n: usize,
    pub instance: usize,
    pub report: CheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct DualResult {
    pub n: usize,
    pub instance: usize,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckOutcome {
    pub tol: f64,
    pub dual_tol: f64,
    pub finite_difference: Vec<FdResult>,
    pub dual: Vec<DualResult>,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.finite_difference.iter().all(|r| r.report.passed) && self.dual.iter().all(|d| d.passed)
    }

    pub fn worst_fd(&self) -> f64 {
        self.finite_difference.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst_dual(&self) -> f64 {
        self.dual.iter().map(|d| d.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<String> {
        let fd = self
            .finite_difference
            .iter()
            .filter(|r| !r.report.passed)
            .map(|r| format!("{} n={} #{}: {:e}", r.layer, r.n, r.instance, r.report.max_rel_error));
        let dual = self.dual.iter().filter(|d| !d.passed).map(|d| format!("dual n={} #{}: {:e}", d.n, d.instance, d.rel_error));
        fd.chain(dual).collect()
    }
}

pub fn layer_kinds(labels: &[String]) -> Result<Vec<LayerKind>> {
    if labels.iter().any(|l| l == "all") {
        return Ok(LayerKind::ALL.to_vec());
    }
    labels
        .iter()
        .map(|l| {
            LayerKind::parse(l).ok_or_else(|| {
                let valid: Vec<&str> = LayerKind::ALL.iter().map(|k| k.label()).collect();
                CliError::Config(format!("unknown layer {l:?}; expected all or one of {}", valid.join(", ")))
            })
        })
        .collect()
}

pub fn run_gradcheck(g: &GradcheckSection) -> Result<GradcheckOutcome> {
    let kinds = layer_kinds(&g.gc_layers)?;
    let mut finite_difference = Vec::new();
    if g.gc_mode != "dual" {
        let opts = GradCheckOptions {
            step: g.gc_step,
            tol: g.gc_tol,
            seed: g.gc_seed,
            ..GradCheckOptions::default()
        };
        let reports = run_suite(&kinds, &g.gc_sizes, g.gc_instances, &opts);
        let labels = kinds.iter().flat_map(|k| g.gc_sizes.iter().flat_map(move |&n| (0..g.gc_instances).map(move |i| (k.label(), n, i))));
        finite_difference = labels
            .zip(reports)
            .map(|((layer, n, instance), report)| FdResult {
                layer: layer.to_string(),
                n,
                instance,
                report,
            })
            .collect();
    }
    let mut dual = Vec::new();
    if g.gc_mode != "fd" {
        let root = RngState::new(g.gc_seed);
        dual = sdd_core::exec::map_indices(g.dual_instances, |i| {
            let rel_error = sdd_dual_derivation_error(g.dual_n, &mut root.split(DUAL_STREAM + i as u64));
            DualResult {
                n: g.dual_n,
                instance: i,
                rel_error,
                passed: rel_error < g.dual_tol,
            }
        });
    }
    Ok(GradcheckOutcome {
        tol: g.gc_tol,
        dual_tol: g.dual_tol,
        finite_difference,
        dual,
    })
}

/// Per-coordinate table of every checked instance.
pub fn coordinate_table(outcome: &GradcheckOutcome) -> String {
    let mut out = String::from("layer,n,instance,index,analytic,numeric,rel_error\n");
    for r in &outcome.finite_difference {
        for c in &r.report.coordinates {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.layer, r.n, r.instance, c.index, c.analytic, c.numeric, c.rel_error
            ));
        }
    }
    out
}

pub fn write_outcome(outcome: &GradcheckOutcome, out_dir: &Path, with_coordinates: bool) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let write = |name: &str, text: String| {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(io_err(path))
    };
    let mut csv = String::from("layer,n,instance,dim,checked,max_rel_error,tol,passed,skipped\n");
    for r in &outcome.finite_difference {
        let p = &r.report;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.layer, r.n, r.instance, p.dim, p.checked, p.max_rel_error, p.tol, p.passed, p.skipped
        ));
    }
    write(REPORT_CSV, csv)?;
    let mut dual = String::from("n,instance,rel_error,tol,passed\n");
    for d in &outcome.dual {
        dual.push_str(&format!("{},{},{},{},{}\n", d.n, d.instance, d.rel_error, outcome.dual_tol, d.passed));
    }
    write(DUAL_CSV, dual)?;
    if with_coordinates {
        write(COORDS_CSV, coordinate_table(outcome))?;
    }
    let mut summary = serde_json::to_value(outcome).map_err(|e| CliError::Config(e.to_string()))?;
    // Coordinates go to the CSV table; the JSON keeps the worst entry only.
    if let Some(list) = summary.get_mut("finite_difference").and_then(|v| v.as_array_mut()) {
        for r in list {
            if let Some(rep) = r.get_mut("report").and_then(|v| v.as_object_mut()) {
                rep.remove("coordinates");
            }
        }
    }
    summary["passed"] = serde_json::Value::Bool(outcome.passed());
    write(REPORT_JSON, serde_json::to_string_pretty(&summary).map_err(|e| CliError::Config(e.to_string()))? + "\n")
}
