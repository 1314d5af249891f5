//! Acceptance run: every criterion at its stated tolerance, one result line
//! each. Criteria recorded as unattained in the decisions ledger are still
//! measured and reported as FAIL, but do not fail the process; any other
//! failure does.
//!
//! `SDD_WRITE_BASELINE=1` rewrites `verification/baseline.json` from this
//! run's measurements instead of comparing against it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sdd_cli::baseline::{close, Baseline, Measured, Thresholds, TrainingRecord, BASELINE_PATH, FINAL_LOSS_MAX, INITIAL_LOSS_REL_TOL};
use sdd_cli::config::RunConfig;
use sdd_cli::gradcheck::run_gradcheck;
use sdd_cli::probe::{gradnorm_profile, ProbeShape};
use sdd_cli::sweep::{run_cell, CellSpec, Perturbation};
use sdd_cli::verify;
use sdd_core::layers::Module;
use sdd_core::model::{flops_overhead, param_count, sdd_extra_flops, ModelConfig, MoeConfig, NormVariant, TransformerModel};
use sdd_core::train::{read_metrics, Checkpoint, Dataset, RunStatus, Trainer};

/// Criteria measured faithfully but known not to hold at desk scale.
const KNOWN_UNATTAINED: &[(u32, &str)] = &[(10, "SddPost ff_out spread exceeds PostNorm at init; see decisions ledger")];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within_budget(elapsed: Duration, budget_s: f64) -> bool {
    elapsed.as_secs_f64() < budget_s
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Shared state filled by earlier criteria and read by the baseline check.
#[derive(Default)]
struct Ctx {
    forward: Vec<(usize, f64)>,
    reverse: Vec<(usize, f64)>,
    preservation_fraction: f64,
    fc_ratio: f64,
    training: Vec<TrainingRecord>,
}

fn c1_gradient_exactness() -> Outcome {
    let cfg = RunConfig::default();
    let g = sdd_cli::config::GradcheckSection {
        gc_mode: "fd".into(),
        ..cfg.gradcheck
    };
    let t = Instant::now();
    let out = run_gradcheck(&g).expect("gradient suite runs");
    let elapsed = t.elapsed();
    let mut per_layer: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &out.finite_difference {
        let e = per_layer.entry(r.layer.as_str()).or_insert(0.0);
        *e = e.max(r.report.max_rel_error);
    }
    let all_checked = out.finite_difference.iter().all(|r| !r.report.skipped);
    let worst = out.worst_fd();
    let layers: Vec<String> = per_layer.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect();
    outcome(
        out.passed() && all_checked && worst < 1e-6 && within_budget(elapsed, 120.0),
        format!(
            "{} instances, worst {worst:.2e} < 1e-6 [{}], {:.1}s < 120s",
            out.finite_difference.len(),
            layers.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn c2_dual_derivation() -> Outcome {
    let g = sdd_cli::config::GradcheckSection {
        gc_mode: "dual".into(),
        ..RunConfig::default().gradcheck
    };
    let t = Instant::now();
    let out = run_gradcheck(&g).expect("dual suite runs");
    let elapsed = t.elapsed();
    outcome(
        out.dual.len() == 100 && out.passed() && out.worst_dual() < 1e-12 && within_budget(elapsed, 10.0),
        format!("100 instances, worst {:.2e} < 1e-12, {:.2}s < 10s", out.worst_dual(), elapsed.as_secs_f64()),
    )
}

fn equivalence(ctx: &mut Ctx, forward: bool) -> Outcome {
    let v = RunConfig::default().verify;
    let t = Instant::now();
    let (stats, checks) = if forward { verify::forward_suite(&v) } else { verify::reverse_suite(&v) }.expect("suite runs");
    let elapsed = t.elapsed();
    let medians: Vec<(usize, f64)> = stats.iter().map(|s| (s.n, s.median)).collect();
    let budget = if forward { 60.0 } else { 120.0 };
    let sizes_ok = medians.iter().map(|m| m.0).collect::<Vec<_>>() == [64, 256, 1024] && stats.iter().all(|s| s.trials == 200);
    let passed = sizes_ok && checks.len() == 2 && checks.iter().all(|c| c.passed) && within_budget(elapsed, budget);
    let text: Vec<String> = medians.iter().map(|(n, m)| format!("n={n}: {m:.4}")).collect();
    if forward {
        ctx.forward = medians;
    } else {
        ctx.reverse = medians;
    }
    outcome(
        passed,
        format!("medians {} (decreasing, < 0.05 at 1024), {:.1}s < {budget}s", text.join(", "), elapsed.as_secs_f64()),
    )
}

fn c5_concentration() -> Outcome {
    let v = verify::concentration_suite(&RunConfig::default().verify);
    let s = v.0.iter().find(|s| s.n == 1024).expect("n = 1024 requested");
    outcome(
        s.trials == 1000 && v.1.len() == 2 && v.1.iter().all(|c| c.passed),
        format!("mean {:.5} in [0.99, 1.01], stddev {:.5} < 0.05", s.mean, s.stddev),
    )
}

fn c6_preservation(ctx: &mut Ctx) -> Outcome {
    let v = RunConfig::default().verify;
    let (stats, pres) = verify::preservation_suite(&v).expect("preservation runs");
    let (_, fc) = verify::preservation_fc_suite(&v).expect("contrast runs");
    ctx.preservation_fraction = pres.measured;
    ctx.fc_ratio = fc.measured;
    outcome(
        stats.n == 1024 && stats.trials == 500 && pres.passed && fc.passed,
        format!(
            "{:.3} of 500 ratios in [0.9, 1.1] (>= 0.95); FC x10 ratio {:.4} (10 ± 10%)",
            pres.measured, fc.measured
        ),
    )
}

fn c7_frobenius() -> Outcome {
    let (scaling, c) = verify::scaling_suite(&RunConfig::default().verify).expect("scaling runs");
    outcome(c.passed, format!("slope {:.6} over {} scales (-1 ± 0.05)", scaling.slope, scaling.points.len()))
}

fn c8_overhead() -> Outcome {
    let example = sdd_extra_flops(1, 4096, 2048);
    let mut ok = example == 50_331_648;
    let mut notes = vec![format!("6BSH(1,4096,2048) = {example}")];
    let mut configs = Vec::new();
    for v in NormVariant::ALL {
        configs.push(ModelConfig::desk_dense(v));
        configs.push(ModelConfig::desk_moe(v));
        configs.push(ModelConfig {
            moe: Some(MoeConfig {
                sdd_router: true,
                ..MoeConfig::default()
            }),
            ..ModelConfig::desk_moe(v)
        });
    }
    let mut alpha_ok = true;
    let mut count_ok = true;
    let mut per_app_ok = true;
    for cfg in &configs {
        let m = TransformerModel::<f32>::build(cfg).expect("valid config");
        let mut enumerated = 0u64;
        let mut alpha = 0u64;
        let mut sdd_layers = 0u64;
        let mut alpha_matches_rows = true;
        m.visit_params(&mut |p| {
            enumerated += p.numel() as u64;
            if p.name.ends_with(".alpha") {
                sdd_layers += 1;
                alpha += p.numel() as u64;
                let v = m.param(&p.name.replace(".alpha", ".v")).expect("alpha has a direction matrix");
                alpha_matches_rows &= v.value.shape()[0] == p.numel();
            }
        });
        let report = flops_overhead(cfg, 2, 64);
        count_ok &= enumerated == param_count(cfg);
        alpha_ok &= alpha_matches_rows && report.alpha_params == alpha && report.sdd_layers == sdd_layers;
        per_app_ok &= report.flops_per_application == 6 * 2 * 64 * cfg.d_model as u64;
        if cfg.variant.is_sdd() && cfg.moe.is_none() {
            let base = param_count(&ModelConfig {
                variant: if cfg.variant.is_post() { NormVariant::PostNorm } else { NormVariant::PreNorm },
                ..cfg.clone()
            });
            alpha_ok &= param_count(cfg) - base == alpha;
        }
    }
    ok &= alpha_ok && count_ok && per_app_ok;
    notes.push(format!(
        "{} configs: param_count == enumeration {count_ok}, alpha = output rows {alpha_ok}, 6BSH per application {per_app_ok}",
        configs.len()
    ));
    outcome(ok, notes.join("; "))
}

fn ema_slope(values: &[(f64, f64)]) -> f64 {
    let x: Vec<f64> = values.iter().map(|p| p.0).collect();
    let y: Vec<f64> = values.iter().map(|p| p.1).collect();
    sdd_core::theory::fit_slope(&x, &y)
}

fn c9_training(ctx: &mut Ctx, data: &Dataset) -> Outcome {
    let cfg = RunConfig::default();
    let base = cfg.model_config().expect("default model");
    let ln256 = 256f64.ln();
    let mut notes = Vec::new();

    let mut init_ok = true;
    let mut inits = Vec::new();
    for v in NormVariant::ALL {
        let mut t = Trainer::new(&ModelConfig { variant: v, ..base.clone() }, &cfg.train).expect("trainer");
        let l = t.train_step(data).expect("step 0").record.loss;
        init_ok &= (l / ln256 - 1.0).abs() <= INITIAL_LOSS_REL_TOL;
        inits.push(format!("{v}={l:.3}"));
    }
    notes.push(format!("step-0 loss {} (ln256 = {ln256:.3} ± 10%)", inits.join(" ")));

    let dir = tempfile::tempdir().expect("temp dir");
    let mut cells: Vec<CellSpec> = Perturbation::ALL
        .iter()
        .map(|&p| {
            let mut model = ModelConfig {
                variant: NormVariant::SddPost,
                ..base.clone()
            };
            let mut train = cfg.train.clone();
            p.apply(&mut model, &mut train);
            CellSpec {
                variant: "sdd_post".into(),
                setting: p.label().into(),
                model,
                train,
            }
        })
        .collect();
    let mut post = ModelConfig {
        variant: NormVariant::PostNorm,
        ..base.clone()
    };
    let mut post_train = cfg.train.clone();
    Perturbation::LrX5.apply(&mut post, &mut post_train);
    cells.push(CellSpec {
        variant: "post_norm".into(),
        setting: "lr_x5".into(),
        model: post,
        train: post_train,
    });

    let mut sdd_ok = true;
    let mut cell_secs = Vec::new();
    for spec in &cells {
        let t = Instant::now();
        let cell = run_cell(spec, data, dir.path()).expect("cell trains");
        cell_secs.push(t.elapsed().as_secs_f64());
        let records = read_metrics(&dir.path().join(&cell.metrics_path)).expect("metrics");
        let ema: Vec<(f64, f64)> = records.iter().map(|r| (r.step as f64, r.ema_loss)).collect();
        let initial = records.first().map(|r| r.loss + r.aux_loss);
        let status = match cell.status {
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
        };
        ctx.training.push(TrainingRecord {
            variant: cell.variant.clone(),
            setting: cell.setting.clone(),
            status: status.into(),
            initial_loss: initial,
            final_ema_loss: cell.final_loss,
            final_val_loss: cell.final_val_loss,
        });
        if spec.variant == "sdd_post" {
            let finite = ema.iter().all(|p| p.1.is_finite());
            let first = ema.first().map_or(f64::NAN, |p| p.1);
            let last = ema.last().map_or(f64::NAN, |p| p.1);
            let slope = ema_slope(&ema);
            let ok = cell.status == RunStatus::Completed
                && records.len() == cfg.train.total_steps
                && finite
                && last < first
                && slope < 0.0
                && last < FINAL_LOSS_MAX;
            sdd_ok &= ok;
            notes.push(format!(
                "sdd_post/{}: {status}, EMA {first:.3} -> {last:.3} (slope {slope:.2e}), val {:?}",
                cell.setting,
                cell.final_val_loss.map(|v| (v * 1e4).round() / 1e4)
            ));
        } else {
            notes.push(format!(
                "post_norm/lr_x5 (recorded): {status}, final EMA {:?}",
                cell.final_loss.map(|v| (v * 1e4).round() / 1e4)
            ));
        }
    }
    let mean = cell_secs.iter().sum::<f64>() / cell_secs.len() as f64;
    notes.push(format!("{mean:.0}s per cell, full 4x4 grid ≈ {:.1} min", mean * 16.0 / 60.0));
    outcome(init_ok && sdd_ok, notes.join("; "))
}

fn c10_gradnorm_spread(data: &Dataset) -> Outcome {
    let cfg = RunConfig::default();
    let base = cfg.model_config().expect("default model");
    let shape = ProbeShape {
        batches: 8,
        batch: cfg.train.batch,
        seq: cfg.train.seq_len,
        zero_upstream: false,
    };
    let seeds = [0, 1, 2];
    let spread = |variant| {
        let p = gradnorm_profile(&ModelConfig { variant, ..base.clone() }, data, &seeds, shape).expect("profile");
        assert_eq!(p.entries().len(), 4 * base.layers);
        p.spread(3)
    };
    let (sdd, post) = (spread(NormVariant::SddPost), spread(NormVariant::PostNorm));
    outcome(sdd <= post, format!("ff_out spread sdd_post {sdd:.4} vs post_norm {post:.4} (need <=)"))
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("under dir").to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}

fn run_cli(args: &[&str], out: &Path) -> i32 {
    let mut full: Vec<String> = vec!["sdd".into()];
    full.extend(args.iter().map(|s| s.to_string()));
    full.push("--out".into());
    full.push(out.to_string_lossy().into_owned());
    sdd_cli::run(full)
}

fn c11_reproducibility(data: &Dataset) -> Outcome {
    let small_train = ["--set", "total_steps=40", "--set", "warmup_steps=5", "--set", "eval_every=20", "--set", "variant=sdd_post"];
    let commands: Vec<Vec<&str>> = vec![
        [&["train"][..], &small_train[..]].concat(),
        vec!["gradnorms", "--set", "probe_seeds=[0]", "--set", "probe_batches=2"],
        vec!["similarity", "--set", "probe_tokens=512"],
        vec!["verify", "--n", "16,32", "--set", "concentration_n=[64]", "--set", "preservation_n=1024", "--set", "preservation_trials=50", "--set", "scaling_n=32"],
        vec!["gradcheck", "--n", "4", "--instances", "2"],
        vec![
            "sweep", "--set", "total_steps=12", "--set", "warmup_steps=2", "--set", "eval_every=6", "--set", "sweep_variants=[\"sdd_post\",\"post_norm\"]",
        ],
    ];
    let mut notes = Vec::new();
    let mut ok = true;
    for cmd in &commands {
        let (a, b) = (tempfile::tempdir().expect("temp"), tempfile::tempdir().expect("temp"));
        let (ca, cb) = (run_cli(cmd, a.path()), run_cli(cmd, b.path()));
        let (fa, fb) = (read_dir_bytes(a.path()), read_dir_bytes(b.path()));
        let same = ca == 0 && cb == 0 && !fa.is_empty() && fa == fb;
        ok &= same;
        notes.push(format!("{} {} files {}", cmd[0], fa.len(), if same { "identical" } else { "DIFFER" }));
    }

    let cfg = RunConfig::default();
    let model = cfg.model_config().expect("model");
    let train = sdd_core::train::TrainConfig {
        total_steps: 40,
        warmup_steps: 5,
        eval_every: 10,
        ..cfg.train.clone()
    };
    let mut straight = Trainer::new(&model, &train).expect("trainer");
    let mut rec_a = Vec::new();
    for _ in 0..40 {
        rec_a.push(straight.train_step(data).expect("step").record);
    }
    let mut first = Trainer::new(&model, &train).expect("trainer");
    let mut rec_b = Vec::new();
    for _ in 0..20 {
        rec_b.push(first.train_step(data).expect("step").record);
    }
    let bytes = first.checkpoint().expect("checkpoint").to_bytes();
    drop(first);
    let ckpt = Checkpoint::from_bytes(&bytes).expect("decode");
    let mut resumed = Trainer::from_checkpoint(&ckpt, &model, &train).expect("resume");
    for _ in 20..40 {
        rec_b.push(resumed.train_step(data).expect("step").record);
    }
    let same_records = serde_json::to_string(&rec_a).unwrap() == serde_json::to_string(&rec_b).unwrap();
    let same_params = straight.checkpoint().unwrap().to_bytes() == resumed.checkpoint().unwrap().to_bytes();
    ok &= same_records && same_params;
    notes.push(format!("checkpoint at 20/40: records identical {same_records}, final state identical {same_params}"));
    outcome(ok, notes.join("; "))
}

fn c12_baseline(ctx: &Ctx) -> Outcome {
    let path = repo_root().join(BASELINE_PATH);
    let measured = Measured {
        forward_median: ctx.forward.clone(),
        reverse_median: ctx.reverse.clone(),
        preservation_fraction: ctx.preservation_fraction,
        fc_ratio: ctx.fc_ratio,
        training: ctx.training.clone(),
    };
    let current = Baseline {
        thresholds: Thresholds::current(),
        measured,
    };
    if std::env::var_os("SDD_WRITE_BASELINE").is_some_and(|v| v == "1") {
        current.save(&path).expect("baseline written");
        return outcome(true, format!("baseline written to {BASELINE_PATH}"));
    }
    let stored = match Baseline::load(&path) {
        Ok(b) => b,
        Err(e) => return outcome(false, format!("cannot read {BASELINE_PATH}: {e}")),
    };
    let rel = 1e-9;
    let pairs_close = |a: &[(usize, f64)], b: &[(usize, f64)]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.0 == y.0 && close(Some(x.1), Some(y.1), rel));
    let (s, c) = (&stored.measured, &current.measured);
    let thresholds = stored.thresholds == current.thresholds;
    let theory = pairs_close(&s.forward_median, &c.forward_median)
        && pairs_close(&s.reverse_median, &c.reverse_median)
        && close(Some(s.preservation_fraction), Some(c.preservation_fraction), rel)
        && close(Some(s.fc_ratio), Some(c.fc_ratio), rel);
    let training = s.training.len() == c.training.len()
        && s.training.iter().zip(&c.training).all(|(a, b)| {
            a.variant == b.variant
                && a.setting == b.setting
                && a.status == b.status
                && close(a.initial_loss, b.initial_loss, rel)
                && close(a.final_ema_loss, b.final_ema_loss, rel)
                && close(a.final_val_loss, b.final_val_loss, rel)
        });
    outcome(
        thresholds && theory && training,
        format!("{BASELINE_PATH}: thresholds match {thresholds}, oracle values reproduce {theory}, training outcomes reproduce {training}"),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let cfg = RunConfig::default();
    let data = sdd_cli::dataset(&cfg).expect("built-in corpus");
    let mut ctx = Ctx::default();
    let criteria: Vec<(u32, &str, Box<dyn FnOnce(&mut Ctx) -> Outcome + '_>)> = vec![
        (1, "gradient exactness", Box::new(|_| c1_gradient_exactness())),
        (2, "dual-derivation identity", Box::new(|_| c2_dual_derivation())),
        (3, "forward equivalence", Box::new(|c| equivalence(c, true))),
        (4, "reverse equivalence", Box::new(|c| equivalence(c, false))),
        (5, "rms concentration", Box::new(|_| c5_concentration())),
        (6, "gradient-norm preservation", Box::new(c6_preservation)),
        (7, "frobenius scaling", Box::new(|_| c7_frobenius())),
        (8, "overhead accounting", Box::new(|_| c8_overhead())),
        (9, "desk-scale training stability", Box::new(|c| c9_training(c, &data))),
        (10, "gradient-norm spread", Box::new(|_| c10_gradnorm_spread(&data))),
        (11, "reproducibility", Box::new(|_| c11_reproducibility(&data))),
        (12, "threshold provenance", Box::new(|c| c12_baseline(c))),
    ];
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        let t = Instant::now();
        let o = run(&mut ctx);
        let known = KNOWN_UNATTAINED.iter().find(|k| k.0 == id);
        let verdict = match (o.passed, known) {
            (true, _) => "PASS".to_string(),
            (false, Some((_, why))) => format!("FAIL (known: {why})"),
            (false, None) => {
                unexpected.push(id);
                "FAIL".to_string()
            }
        };
        println!("criterion {id:>2} {name}: {verdict} [{:.1}s] {}", t.elapsed().as_secs_f64(), o.detail);
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
