//! The theory verification suite and its hard thresholds.

use std::path::Path;

use sdd_core::layers::gradcheck::{grad_check, layer_instance, sdd_dual_derivation_error, Corrupted, GradCheckOptions, LayerKind};
use sdd_core::theory::{self, to_csv, TrialStats};
use sdd_core::RngState;
use serde::{Deserialize, Serialize};

use crate::config::VerifySection;
use crate::error::{io_err, CliError, Result};

/// Median equivalence error allowed at `EQUIVALENCE_AT_N`.
pub const EQUIVALENCE_MAX_MEDIAN: f64 = 0.05;
pub const EQUIVALENCE_AT_N: usize = 1024;
pub const CONCENTRATION_AT_N: usize = 1024;
pub const CONCENTRATION_MEAN_BAND: (f64, f64) = (0.99, 1.01);
pub const CONCENTRATION_MAX_STDDEV: f64 = 0.05;
pub const PRESERVATION_BAND: (f64, f64) = (0.9, 1.1);
pub const PRESERVATION_MIN_FRACTION: f64 = 0.95;
/// Relative tolerance on the contrast ratio `mean(×mult) / mean(×1)`.
pub const FC_RATIO_TOL: f64 = 0.10;
pub const SLOPE_TARGET: f64 = -1.0;
pub const SLOPE_TOL: f64 = 0.05;
pub const SDD_FD_TOL: f64 = 1e-6;
pub const DUAL_TOL: f64 = 1e-12;

pub const SUMMARY_JSON: &str = "verify_summary.json";
pub const SUMMARY_MD: &str = "verify_summary.md";

/// CSV file name of each experiment, in emission order.
pub const EXPERIMENT_FILES: [&str; 6] = [
    "forward_equivalence.csv",
    "reverse_equivalence.csv",
    "rms_concentration.csv",
    "norm_preservation.csv",
    "norm_preservation_fc.csv",
    "frobenius_scaling.csv",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub experiment: String,
    pub measured: f64,
    pub threshold: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    /// One entry per CSV in [`EXPERIMENT_FILES`].
    pub experiments: Vec<Vec<TrialStats>>,
    pub frobenius_slope: f64,
    pub checks: Vec<Check>,
}

/// Machine-readable summary written next to the CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub passed: bool,
    pub frobenius_slope: f64,
    pub medians: Vec<(String, usize, f64)>,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn summary(&self) -> VerifySummary {
        VerifySummary {
            passed: self.passed(),
            frobenius_slope: self.frobenius_slope,
            medians: self.experiments.iter().flatten().map(|s| (s.experiment.clone(), s.n, s.median)).collect(),
            checks: self.checks.clone(),
        }
    }
}

fn check(name: &str, experiment: &str, measured: f64, threshold: String, passed: bool) -> Check {
    Check {
        name: name.into(),
        experiment: experiment.into(),
        measured,
        threshold,
        passed,
    }
}

/// Monotone decrease of the median over increasing `n`, plus the bound at
/// `EQUIVALENCE_AT_N` when that size is requested.
pub fn equivalence_checks(experiment: &str, stats: &[TrialStats]) -> Vec<Check> {
    let mut out = Vec::new();
    if stats.len() >= 2 {
        let worst_step = stats.windows(2).map(|w| w[1].median - w[0].median).fold(f64::NEG_INFINITY, f64::max);
        out.push(check(
            "median_decreases_with_n",
            experiment,
            worst_step,
            "max successive median change < 0".into(),
            worst_step < 0.0,
        ));
    }
    if let Some(s) = stats.iter().find(|s| s.n == EQUIVALENCE_AT_N) {
        out.push(check(
            "median_at_1024",
            experiment,
            s.median,
            format!("< {EQUIVALENCE_MAX_MEDIAN}"),
            s.median < EQUIVALENCE_MAX_MEDIAN,
        ));
    }
    out
}

/// Worst SDD gradient error over a few random instances, optionally with a
/// perturbed backward.
fn sdd_gradient_checks(v: &VerifySection, rng: &RngState) -> Vec<Check> {
    let opts = GradCheckOptions::default();
    let mut fd_worst = 0.0f64;
    let mut dual_worst = 0.0f64;
    for i in 0..v.sdd_check_instances {
        let mut r = rng.split(i as u64);
        let op = layer_instance(LayerKind::Sdd, v.sdd_check_n, &mut r);
        let report = if v.fault == "sdd_backward" {
            grad_check(&Corrupted { inner: op, index: 0, delta: 1e-3 }, &opts)
        } else {
            grad_check(&op, &opts)
        };
        fd_worst = fd_worst.max(report.max_rel_error);
        dual_worst = dual_worst.max(sdd_dual_derivation_error(v.sdd_check_n, &mut r));
    }
    vec![
        check("sdd_backward_vs_finite_difference", "sdd_gradient", fd_worst, format!("< {SDD_FD_TOL:e}"), fd_worst < SDD_FD_TOL),
        check("sdd_closed_form_vs_tape", "sdd_gradient", dual_worst, format!("< {DUAL_TOL:e}"), dual_worst < DUAL_TOL),
    ]
}

/// Seed stream of each experiment under `verify_seed`.
pub mod stream {
    pub const FORWARD: u64 = 0;
    pub const REVERSE: u64 = 1;
    pub const CONCENTRATION: u64 = 2;
    pub const PRESERVATION: u64 = 3;
    pub const PRESERVATION_FC: u64 = 4;
    pub const SCALING: u64 = 5;
    pub const SDD_GRADIENT: u64 = 6;
}

fn root(v: &VerifySection, stream: u64) -> RngState {
    RngState::new(v.verify_seed).split(stream)
}

fn sizes(v: &VerifySection) -> Vec<usize> {
    let mut s = v.verify_n.clone();
    s.sort_unstable();
    s.dedup();
    s
}

pub fn forward_suite(v: &VerifySection) -> Result<(Vec<TrialStats>, Vec<Check>)> {
    let rng = root(v, stream::FORWARD);
    let stats = sizes(v)
        .iter()
        .map(|&n| theory::forward_equivalence_error(n, v.equivalence_trials, &rng))
        .collect::<sdd_core::Result<Vec<_>>>()?;
    let checks = equivalence_checks("forward_equivalence", &stats);
    Ok((stats, checks))
}

pub fn reverse_suite(v: &VerifySection) -> Result<(Vec<TrialStats>, Vec<Check>)> {
    let rng = root(v, stream::REVERSE);
    let stats = sizes(v)
        .iter()
        .map(|&n| theory::reverse_equivalence_error(n, v.equivalence_trials, &rng))
        .collect::<sdd_core::Result<Vec<_>>>()?;
    let checks = equivalence_checks("reverse_equivalence", &stats);
    Ok((stats, checks))
}

pub fn concentration_suite(v: &VerifySection) -> (Vec<TrialStats>, Vec<Check>) {
    let rng = root(v, stream::CONCENTRATION);
    let stats: Vec<TrialStats> = v.concentration_n.iter().map(|&n| theory::rms_concentration(n, v.concentration_trials, &rng)).collect();
    let mut checks = Vec::new();
    if let Some(s) = stats.iter().find(|s| s.n == CONCENTRATION_AT_N) {
        let (lo, hi) = CONCENTRATION_MEAN_BAND;
        checks.push(check("mean_rms_at_1024", "rms_concentration", s.mean, format!("in [{lo}, {hi}]"), s.mean >= lo && s.mean <= hi));
        checks.push(check(
            "stddev_rms_at_1024",
            "rms_concentration",
            s.stddev,
            format!("< {CONCENTRATION_MAX_STDDEV}"),
            s.stddev < CONCENTRATION_MAX_STDDEV,
        ));
    }
    (stats, checks)
}

pub fn preservation_suite(v: &VerifySection) -> Result<(TrialStats, Check)> {
    let stats = theory::norm_preservation(v.preservation_n, v.preservation_trials, &root(v, stream::PRESERVATION))?;
    let (lo, hi) = PRESERVATION_BAND;
    let frac = stats.fraction_within(lo, hi);
    let c = check(
        "fraction_ratio_in_band",
        "norm_preservation",
        frac,
        format!(">= {PRESERVATION_MIN_FRACTION} within [{lo}, {hi}]"),
        frac >= PRESERVATION_MIN_FRACTION,
    );
    Ok((stats, c))
}

pub fn preservation_fc_suite(v: &VerifySection) -> Result<(Vec<TrialStats>, Check)> {
    let rng = root(v, stream::PRESERVATION_FC);
    let base = theory::norm_preservation_fc(v.preservation_n, v.preservation_trials, 1.0, &rng)?;
    let big = theory::norm_preservation_fc(v.preservation_n, v.preservation_trials, v.fc_std_mult, &rng)?;
    let ratio = big.mean / base.mean;
    let c = check(
        "ratio_scales_with_weight_std",
        "norm_preservation_fc",
        ratio,
        format!("{} ± {}%", v.fc_std_mult, FC_RATIO_TOL * 100.0),
        (ratio / v.fc_std_mult - 1.0).abs() <= FC_RATIO_TOL,
    );
    Ok((vec![base, big], c))
}

pub fn scaling_suite(v: &VerifySection) -> Result<(theory::FrobeniusScaling, Check)> {
    let scaling = theory::frobenius_scaling(v.scaling_n, &v.scaling_scales, v.scaling_trials, &root(v, stream::SCALING))?;
    let c = check(
        "loglog_slope",
        "frobenius_scaling",
        scaling.slope,
        format!("{SLOPE_TARGET} ± {SLOPE_TOL}"),
        (scaling.slope - SLOPE_TARGET).abs() <= SLOPE_TOL,
    );
    Ok((scaling, c))
}

pub fn run_verify(v: &VerifySection) -> Result<VerifyReport> {
    let (forward, mut checks) = forward_suite(v)?;
    let (reverse, c) = reverse_suite(v)?;
    checks.extend(c);
    let (concentration, c) = concentration_suite(v);
    checks.extend(c);
    let (pres, c) = preservation_suite(v)?;
    checks.push(c);
    let (fc, c) = preservation_fc_suite(v)?;
    checks.push(c);
    let (scaling, c) = scaling_suite(v)?;
    checks.push(c);
    checks.extend(sdd_gradient_checks(v, &root(v, stream::SDD_GRADIENT)));
    Ok(VerifyReport {
        experiments: vec![
            forward,
            reverse,
            concentration,
            vec![pres],
            fc,
            scaling.points.into_iter().map(|p| p.stats).collect(),
        ],
        frobenius_slope: scaling.slope,
        checks,
    })
}

fn fmt_measured(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

pub fn markdown(report: &VerifyReport) -> String {
    let mut out = String::from("# Verification summary\n\n| experiment | check | measured | threshold | result |\n|---|---|---|---|---|\n");
    for c in &report.checks {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            c.experiment,
            c.name,
            fmt_measured(c.measured),
            c.threshold,
            if c.passed { "pass" } else { "FAIL" }
        ));
    }
    out.push_str(&format!("\nOverall: {}\n", if report.passed() { "pass" } else { "FAIL" }));
    out
}

pub fn write_report(report: &VerifyReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let write = |name: &str, text: String| {
        let path = out_dir.join(name);
        std::fs::write(&path, text).map_err(io_err(path))
    };
    for (file, stats) in EXPERIMENT_FILES.iter().zip(&report.experiments) {
        write(file, to_csv(stats))?;
    }
    let json = serde_json::to_string_pretty(&report.summary()).map_err(|e| CliError::Config(e.to_string()))?;
    write(SUMMARY_JSON, json + "\n")?;
    write(SUMMARY_MD, markdown(report))
}
