//! End-to-end runs of the `sdd` binary: exit codes, diagnostics and outputs.

use std::path::Path;
use std::process::{Command, Output};

fn sdd(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdd"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SHORT_TRAIN: &[&str] = &["--set", "total_steps=12", "--set", "warmup_steps=2", "--set", "eval_every=6"];

#[test]
fn help_succeeds_and_missing_command_is_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_sdd")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gradcheck"));
    let o = Command::new(env!("CARGO_BIN_EXE_sdd")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_key_suggests_nearest() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdd(&["train", "--set", "total_step=5"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("\"total_steps\""), "{}", stderr(&o));
}

#[test]
fn type_error_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdd(&["train", "--set", "lr_peak=fast"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lr_peak"), "{}", stderr(&o));
}

#[test]
fn config_file_is_read_and_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[model]\nvariant = \"pre_norm\"\n\n[train]\ntotal_steps = 8\nwarmup_steps = 2\neval_every = 4\n").unwrap();
    let out = dir.path().join("out");
    let o = sdd(&["train", "--config", cfg.to_str().unwrap(), "--set", "train.total_steps=6"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echoed = std::fs::read_to_string(out.join("config.effective.toml")).unwrap();
    assert!(echoed.contains("variant = \"pre_norm\""));
    assert!(echoed.contains("total_steps = 6"));
    let lines = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);
}

#[test]
fn missing_config_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdd(&["train", "--config", "/nonexistent/run.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_and_resume_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let args = [&["train"][..], SHORT_TRAIN].concat();
    let o = sdd(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["metrics.jsonl", "checkpoint.bin", "summary.json", "config.effective.toml"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read(dir.path().join("metrics.jsonl")).unwrap();
    let resumed = sdd(&[&args[..], &["--resume"]].concat(), dir.path());
    assert_eq!(resumed.status.code(), Some(0), "{}", stderr(&resumed));
    assert_eq!(std::fs::read(dir.path().join("metrics.jsonl")).unwrap(), metrics);
}

#[test]
fn gradcheck_passes_and_injected_fault_fails_verify() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdd(&["gradcheck", "--layer", "sdd", "--n", "4", "--instances", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("gradcheck.json").is_file());

    let small = ["--n", "16", "--set", "concentration_n=[64]", "--set", "preservation_n=1024", "--set", "preservation_trials=20", "--set", "scaling_n=16", "--set", "equivalence_trials=5"];
    let clean = sdd(&[&["verify"][..], &small].concat(), dir.path());
    assert_eq!(clean.status.code(), Some(0), "{}", stderr(&clean));
    let faulty = sdd(&[&["verify"][..], &small, &["--set", "fault=sdd_backward"]].concat(), dir.path());
    assert_eq!(faulty.status.code(), Some(1), "{}", stderr(&faulty));
    let summary = std::fs::read_to_string(dir.path().join("verify_summary.json")).unwrap();
    assert!(summary.contains("false"));
}

#[test]
fn plot_rejects_empty_metrics_and_draws_real_ones() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = sdd(&["plot", "--input", empty.to_str().unwrap()], &dir.path().join("plots"));
    assert_eq!(o.status.code(), Some(2));

    let run = dir.path().join("run");
    assert_eq!(sdd(&[&["train"][..], SHORT_TRAIN].concat(), &run).status.code(), Some(0));
    let metrics = run.join("metrics.jsonl");
    let o = sdd(&["plot", "--input", metrics.to_str().unwrap()], &dir.path().join("plots"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let svg = std::fs::read_to_string(dir.path().join("plots/loss.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
}

#[test]
fn unknown_variant_lists_choices() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdd(&["train", "--set", "variant=sdd_middle"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sdd_post"), "{}", stderr(&o));
}
