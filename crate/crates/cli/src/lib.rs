//! `sdd` command-line driver: training, verification suites, gradient
//! checks, ablation sweeps, probes and SVG rendering.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage, configuration or input
//! error. The default output directory is taken from `SDD_OUT_DIR` when
//! `--out` is absent.

pub mod baseline;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod plot;
pub mod probe;
pub mod svg;
pub mod sweep;
pub mod verify;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sdd_core::model::{NormVariant, TransformerModel};
use sdd_core::train::{self, corpus, Checkpoint, Dataset, Trainer};

use crate::config::{parse_variant, RunConfig};
use crate::error::{io_err, CliError, Result};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SDD_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "sdd-out";

#[derive(Debug, Parser)]
#[command(name = "sdd", version, about = "Train, verify and analyze scale-distribution decoupled transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file; defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, bare (`lr_mult=5`) or qualified (`train.lr_mult=5`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (default: $SDD_OUT_DIR, else ./sdd-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model, writing metrics.jsonl, checkpoint.bin and summary.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a matching checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run the theory suites and check their thresholds.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Equivalence sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
    },
    /// Check analytic gradients against finite differences and the tape path.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tol: Option<f64>,
        /// Layer labels, comma separated (default: all).
        #[arg(long, value_delimiter = ',')]
        layer: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
        /// fd, dual or all.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Train a grid of cells (robustness or depth).
    Sweep {
        #[command(flatten)]
        common: Common,
        /// robustness or depth.
        #[arg(long)]
        kind: Option<String>,
        /// Run independent cells concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Per-layer gradient norms at initialization.
    Gradnorms {
        #[command(flatten)]
        common: Common,
    },
    /// Layer-wise cosine similarity of hidden states.
    Similarity {
        #[command(flatten)]
        common: Common,
    },
    /// Render JSONL metrics and result CSVs as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn list<T: ToString>(values: &[T]) -> String {
    format!("[{}]", values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
}

fn quoted_list(values: &[String]) -> String {
    format!("[{}]", values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","))
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Verify { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Sweep { common, .. }
            | Command::Gradnorms { common }
            | Command::Similarity { common }
            | Command::Plot { common, .. } => common,
        }
    }

    /// Command-specific flags expressed as overrides; they win over `--set`.
    fn flag_overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        match self {
            Command::Verify { n, .. } if !n.is_empty() => o.push(format!("verify_n={}", list(n))),
            Command::Gradcheck {
                tol,
                layer,
                n,
                mode,
                instances,
                ..
            } => {
                if let Some(t) = tol {
                    o.push(format!("gc_tol={t:e}"));
                    o.push(format!("dual_tol={t:e}"));
                }
                if !layer.is_empty() {
                    o.push(format!("gc_layers={}", quoted_list(layer)));
                }
                if !n.is_empty() {
                    o.push(format!("gc_sizes={}", list(n)));
                }
                if let Some(m) = mode {
                    o.push(format!("gc_mode={m:?}"));
                }
                if let Some(i) = instances {
                    o.push(format!("gc_instances={i}"));
                }
            }
            Command::Sweep { kind, parallel, .. } => {
                if let Some(k) = kind {
                    o.push(format!("sweep_kind={k:?}"));
                }
                if *parallel {
                    o.push("sweep_parallel=true".into());
                }
            }
            _ => {}
        }
        o
    }
}

pub fn out_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Corpus from `corpus_path`, or the built-in generated text when empty.
pub fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let seq = cfg.train.seq_len.max(cfg.model.context.min(256));
    let data = if cfg.data.corpus_path.is_empty() {
        Dataset::from_bytes(corpus::synthesize(cfg.data.corpus_bytes, cfg.data.corpus_seed), seq)
    } else {
        let path = Path::new(&cfg.data.corpus_path);
        if !path.exists() {
            return Err(CliError::Input {
                path: path.to_path_buf(),
                message: "corpus not found".into(),
            });
        }
        train::load_corpus(path, seq)
    };
    data.map_err(|e| match e {
        sdd_core::Error::CorpusTooSmall { .. } => CliError::Config(e.to_string()),
        other => other.into(),
    })
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(io_err(path))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<()> {
    let model = cfg.model_config()?;
    let data = dataset(cfg)?;
    let s = train::train(&model, &cfg.train, &data, out, resume)?;
    let status = match s.status {
        train::RunStatus::Completed => "completed".to_string(),
        train::RunStatus::Diverged => format!("diverged at step {}", s.diverged_at.unwrap_or(s.steps)),
    };
    println!(
        "{}: {status} after {} steps; initial loss {}, final EMA loss {}, validation loss {}",
        model.variant,
        s.steps,
        fmt_opt(s.initial_loss),
        fmt_opt(s.final_ema_loss),
        fmt_opt(s.final_val_loss)
    );
    Ok(())
}

fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<()> {
    let report = verify::run_verify(&cfg.verify)?;
    verify::write_report(&report, out)?;
    print!("{}", verify::markdown(&report));
    let failures = report.failures();
    if failures.is_empty() {
        Ok(())
    } else {
        let names: Vec<String> = failures.iter().map(|c| format!("{}/{} = {}", c.experiment, c.name, c.measured)).collect();
        Err(CliError::CheckFailed(names.join("; ")))
    }
}

fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<()> {
    let g = &cfg.gradcheck;
    let outcome = gradcheck::run_gradcheck(g)?;
    let single = gradcheck::layer_kinds(&g.gc_layers)?.len() == 1 && g.gc_sizes.len() == 1;
    gradcheck::write_outcome(&outcome, out, single)?;
    if single && !outcome.finite_difference.is_empty() {
        println!("{:>8} {:>8} {:>8} {:>24} {:>24} {:>12}", "instance", "dim", "index", "analytic", "numeric", "rel_error");
        for r in &outcome.finite_difference {
            for c in &r.report.coordinates {
                println!(
                    "{:>8} {:>8} {:>8} {:>24.16e} {:>24.16e} {:>12.3e}",
                    r.instance, r.report.dim, c.index, c.analytic, c.numeric, c.rel_error
                );
            }
        }
    }
    if !outcome.finite_difference.is_empty() {
        println!(
            "finite differences: {} instances, worst relative error {:e} (tol {:e})",
            outcome.finite_difference.len(),
            outcome.worst_fd(),
            outcome.tol
        );
    }
    if !outcome.dual.is_empty() {
        println!(
            "closed form vs tape: {} instances, worst relative error {:e} (tol {:e})",
            outcome.dual.len(),
            outcome.worst_dual(),
            outcome.dual_tol
        );
    }
    if outcome.passed() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(outcome.failures().join("; ")))
    }
}

fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = dataset(cfg)?;
    let result = sweep::run_sweep(cfg, &data, out)?;
    result.write(out)?;
    print!("{}", result.to_markdown());
    Ok(())
}

fn probe_variants(cfg: &RunConfig) -> Result<Vec<NormVariant>> {
    cfg.probe.probe_variants.iter().map(|v| parse_variant(v)).collect()
}

fn cmd_gradnorms(cfg: &RunConfig, out: &Path) -> Result<()> {
    let base = cfg.model_config()?;
    let data = dataset(cfg)?;
    let shape = probe::ProbeShape {
        batches: cfg.probe.probe_batches,
        batch: cfg.train.batch,
        seq: cfg.train.seq_len,
        zero_upstream: cfg.probe.zero_upstream,
    };
    let groups = probe::group_names();
    let mut spread = format!("variant,{}\n", groups.join(","));
    for variant in probe_variants(cfg)? {
        let model = sdd_core::model::ModelConfig { variant, ..base.clone() };
        let profile = probe::gradnorm_profile(&model, &data, &cfg.probe.probe_seeds, shape)?;
        write_text(out, &format!("gradnorms_{variant}.csv"), &probe::gradnorm_csv(&profile))?;
        let s = probe::spreads(&profile);
        spread.push_str(&format!("{variant},{},{},{},{}\n", s[0], s[1], s[2], s[3]));
        println!(
            "{variant}: spread {}",
            groups.iter().zip(s).map(|(g, v)| format!("{g}={v:.4}")).collect::<Vec<_>>().join(" ")
        );
    }
    write_text(out, "gradnorm_spread.csv", &spread)
}

fn cmd_similarity(cfg: &RunConfig, out: &Path) -> Result<()> {
    let base = cfg.model_config()?;
    let data = dataset(cfg)?;
    let seq = base.context.min(cfg.probe.probe_tokens);
    let mut summary = String::from("variant,layers,tokens,adjacent_mean\n");
    let mut run = |variant: NormVariant, m: TransformerModel<f64>| -> Result<()> {
        let sim = probe::similarity(&m, &data, cfg.probe.probe_tokens, seq)?;
        write_text(out, &format!("similarity_{variant}.csv"), &sim.to_csv())?;
        let adj = sim.adjacent_mean();
        summary.push_str(&format!(
            "{variant},{},{},{}\n",
            sim.layers,
            sim.tokens,
            adj.map(|v| v.to_string()).unwrap_or_default()
        ));
        println!("{variant}: adjacent-layer mean similarity {} over {} tokens", fmt_opt(adj), sim.tokens);
        Ok(())
    };
    if cfg.probe.probe_checkpoint.is_empty() {
        for variant in probe_variants(cfg)? {
            let model = sdd_core::model::ModelConfig { variant, ..base.clone() };
            run(variant, TransformerModel::<f64>::build(&model)?)?;
        }
    } else {
        let path = Path::new(&cfg.probe.probe_checkpoint);
        let ckpt = Checkpoint::load(path).map_err(|e| CliError::Input {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let trainer = Trainer::from_checkpoint(&ckpt, &base, &cfg.train)?;
        run(base.variant, trainer.model.cast::<f64>())?;
    }
    write_text(out, "similarity_summary.csv", &summary)
}

fn execute(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let mut overrides = common.set.clone();
    overrides.extend(cli.command.flag_overrides());
    let cfg = config::load(common.config.as_deref(), &overrides)?;
    let out = out_dir(common.out.as_deref());
    if let Command::Plot { inputs, .. } = &cli.command {
        for p in plot::plot(inputs, &out)? {
            println!("wrote {}", p.display());
        }
        return Ok(());
    }
    config::write_effective(&cfg, &out)?;
    match &cli.command {
        Command::Train { resume, .. } => cmd_train(&cfg, &out, *resume),
        Command::Verify { .. } => cmd_verify(&cfg, &out),
        Command::Gradcheck { .. } => cmd_gradcheck(&cfg, &out),
        Command::Sweep { .. } => cmd_sweep(&cfg, &out),
        Command::Gradnorms { .. } => cmd_gradnorms(&cfg, &out),
        Command::Similarity { .. } => cmd_similarity(&cfg, &out),
        Command::Plot { .. } => unreachable!("handled above"),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
