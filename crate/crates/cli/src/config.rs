//! Run configuration: a TOML file of sections with globally unique keys,
//! overridden by `--set key=value` pairs.
//!
//! Overrides accept either the bare key (`lr_mult=5`) or the qualified form
//! (`train.lr_mult=5`). Values are parsed as TOML literals and fall back to
//! plain strings, so `variant=sdd_post` and `verify_n=[64,256]` both work.

use std::collections::BTreeMap;
use std::path::Path;

use sdd_core::model::{ModelConfig, MoeConfig, NormVariant};
use sdd_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

pub const EFFECTIVE_CONFIG_FILE: &str = "config.effective.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub gqa_groups: usize,
    pub ffn_hidden: usize,
    pub vocab: usize,
    pub context: usize,
    pub init_seed: u64,
    pub init_std_mult: f64,
    pub sdd_eps: f64,
    pub norm_eps: f64,
    pub moe: bool,
    pub moe_experts: usize,
    pub moe_top_k: usize,
    pub moe_aux_coeff: f64,
    pub moe_sdd_router: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::desk_dense(NormVariant::SddPost);
        let moe = MoeConfig::default();
        Self {
            variant: m.variant.label().to_string(),
            layers: m.layers,
            d_model: m.d_model,
            heads: m.heads,
            gqa_groups: m.gqa_groups,
            ffn_hidden: m.ffn_hidden,
            vocab: m.vocab,
            context: m.context,
            init_seed: m.init_seed,
            init_std_mult: m.init_std_mult,
            sdd_eps: m.sdd_eps,
            norm_eps: m.norm_eps,
            moe: false,
            moe_experts: moe.experts,
            moe_top_k: moe.top_k,
            moe_aux_coeff: moe.aux_coeff,
            moe_sdd_router: moe.sdd_router,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Byte corpus; empty selects the built-in generated corpus.
    pub corpus_path: String,
    pub corpus_bytes: usize,
    pub corpus_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus_path: String::new(),
            corpus_bytes: sdd_core::train::corpus::DEFAULT_CORPUS_BYTES,
            corpus_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub verify_n: Vec<usize>,
    pub equivalence_trials: usize,
    pub concentration_n: Vec<usize>,
    pub concentration_trials: usize,
    pub preservation_n: usize,
    pub preservation_trials: usize,
    pub fc_std_mult: f64,
    pub scaling_n: usize,
    pub scaling_scales: Vec<f64>,
    pub scaling_trials: usize,
    pub sdd_check_n: usize,
    pub sdd_check_instances: usize,
    pub verify_seed: u64,
    /// `none` or `sdd_backward` (perturbs the SDD gradient under check).
    pub fault: String,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            verify_n: vec![64, 256, 1024],
            equivalence_trials: 200,
            concentration_n: vec![1, 64, 1024],
            concentration_trials: 1000,
            preservation_n: 1024,
            preservation_trials: 500,
            fc_std_mult: 10.0,
            scaling_n: 256,
            scaling_scales: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            scaling_trials: 50,
            sdd_check_n: 16,
            sdd_check_instances: 5,
            verify_seed: 0,
            fault: "none".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    /// Layer labels, or `all`.
    pub gc_layers: Vec<String>,
    pub gc_sizes: Vec<usize>,
    pub gc_instances: usize,
    pub gc_tol: f64,
    pub gc_step: f64,
    pub gc_seed: u64,
    /// `fd`, `dual` or `all`.
    pub gc_mode: String,
    pub dual_instances: usize,
    pub dual_n: usize,
    pub dual_tol: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            gc_layers: vec!["all".into()],
            gc_sizes: vec![4, 16, 64],
            gc_instances: 20,
            gc_tol: 1e-6,
            gc_step: sdd_core::layers::gradcheck::DEFAULT_STEP,
            gc_seed: 0,
            gc_mode: "all".into(),
            dual_instances: 100,
            dual_n: 32,
            dual_tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// `robustness` (variant × perturbation) or `depth` (variant × layers).
    pub sweep_kind: String,
    pub sweep_variants: Vec<String>,
    pub perturbations: Vec<String>,
    pub depths: Vec<usize>,
    pub sweep_parallel: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            sweep_kind: "robustness".into(),
            sweep_variants: ["pre_norm", "post_norm", "deep_norm", "sdd_post"].map(String::from).to_vec(),
            perturbations: ["none", "lr_x5", "initstd_x0.1", "no_warmup"].map(String::from).to_vec(),
            depths: vec![4, 8, 12, 16],
            sweep_parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub probe_variants: Vec<String>,
    pub probe_seeds: Vec<u64>,
    pub probe_batches: usize,
    pub probe_tokens: usize,
    /// Checkpoint to load for the similarity probe; empty uses a fresh model.
    pub probe_checkpoint: String,
    /// Backpropagate a zero upstream gradient (sanity probe).
    pub zero_upstream: bool,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            probe_variants: NormVariant::ALL.iter().map(|v| v.label().to_string()).collect(),
            probe_seeds: vec![0, 1, 2],
            probe_batches: 8,
            probe_tokens: 4096,
            probe_checkpoint: String::new(),
            zero_upstream: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub verify: VerifySection,
    pub gradcheck: GradcheckSection,
    pub sweep: SweepSection,
    pub probe: ProbeSection,
}

pub fn parse_variant(s: &str) -> Result<NormVariant> {
    NormVariant::parse(s).ok_or_else(|| {
        let valid: Vec<&str> = NormVariant::ALL.iter().map(|v| v.label()).collect();
        CliError::Config(format!("unknown variant {s:?}; expected one of {}", valid.join(", ")))
    })
}

impl RunConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            layers: m.layers,
            d_model: m.d_model,
            heads: m.heads,
            gqa_groups: m.gqa_groups,
            ffn_hidden: m.ffn_hidden,
            vocab: m.vocab,
            context: m.context,
            variant: parse_variant(&m.variant)?,
            moe: m.moe.then_some(MoeConfig {
                experts: m.moe_experts,
                top_k: m.moe_top_k,
                aux_coeff: m.moe_aux_coeff,
                sdd_router: m.moe_sdd_router,
            }),
            init_seed: m.init_seed,
            init_std_mult: m.init_std_mult,
            sdd_eps: m.sdd_eps,
            norm_eps: m.norm_eps,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Checks every cross-field invariant the commands rely on.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.train.seq_len > self.model.context {
            return Err(CliError::Config(format!(
                "seq_len ({}) exceeds context ({})",
                self.train.seq_len, self.model.context
            )));
        }
        for v in self.sweep.sweep_variants.iter().chain(&self.probe.probe_variants) {
            parse_variant(v)?;
        }
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(CliError::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("equivalence_trials", self.verify.equivalence_trials)?;
        positive("concentration_trials", self.verify.concentration_trials)?;
        positive("preservation_trials", self.verify.preservation_trials)?;
        positive("scaling_trials", self.verify.scaling_trials)?;
        positive("gc_instances", self.gradcheck.gc_instances)?;
        positive("probe_batches", self.probe.probe_batches)?;
        positive("probe_tokens", self.probe.probe_tokens)?;
        if self.verify.verify_n.is_empty() || self.verify.verify_n.contains(&0) {
            return Err(CliError::Config("verify_n needs at least one positive size".into()));
        }
        if self.verify.scaling_scales.len() < 2 || self.verify.scaling_scales.iter().any(|&c| !(c > 0.0)) {
            return Err(CliError::Config("scaling_scales needs at least two positive scales".into()));
        }
        if !matches!(self.verify.fault.as_str(), "none" | "sdd_backward") {
            return Err(CliError::Config(format!("fault must be none or sdd_backward, got {:?}", self.verify.fault)));
        }
        if !matches!(self.gradcheck.gc_mode.as_str(), "fd" | "dual" | "all") {
            return Err(CliError::Config(format!("gc_mode must be fd, dual or all, got {:?}", self.gradcheck.gc_mode)));
        }
        if !matches!(self.sweep.sweep_kind.as_str(), "robustness" | "depth") {
            return Err(CliError::Config(format!(
                "sweep_kind must be robustness or depth, got {:?}",
                self.sweep.sweep_kind
            )));
        }
        if self.probe.probe_seeds.is_empty() {
            return Err(CliError::Config("probe_seeds must not be empty".into()));
        }
        Ok(())
    }
}

/// Section name → its keys, taken from the serialized defaults.
pub fn schema() -> BTreeMap<String, Vec<String>> {
    let value = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    let toml::Value::Table(top) = value else {
        unreachable!("config serializes to a table")
    };
    top.into_iter()
        .map(|(section, v)| {
            let keys = match v {
                toml::Value::Table(t) => t.keys().cloned().collect(),
                _ => Vec::new(),
            };
            (section, keys)
        })
        .collect()
}

fn nearest<'a>(key: &str, candidates: impl Iterator<Item = &'a str>) -> Option<&'a str> {
    candidates.min_by_key(|c| (strsim::levenshtein(key, c), *c))
}

fn unknown_key(key: &str, schema: &BTreeMap<String, Vec<String>>) -> CliError {
    let all = schema.values().flatten().map(String::as_str);
    match nearest(key, all) {
        Some(n) => CliError::Config(format!("unknown key {key:?}; did you mean {n:?}?")),
        None => CliError::Config(format!("unknown key {key:?}")),
    }
}

/// Resolves a bare or `section.key` name to its section.
fn resolve<'a>(key: &'a str, schema: &BTreeMap<String, Vec<String>>) -> Result<(String, &'a str)> {
    if let Some((section, k)) = key.split_once('.') {
        if schema.get(section).is_some_and(|keys| keys.iter().any(|x| x == k)) {
            return Ok((section.to_string(), k));
        }
    }
    schema
        .iter()
        .find(|(_, keys)| keys.iter().any(|x| x == key))
        .map(|(s, _)| (s.clone(), key))
        .ok_or_else(|| unknown_key(key, schema))
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Parses the config file (if any), applies overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(io_err(p))?,
        None => String::new(),
    };
    parse(&text, overrides)
}

pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let schema = schema();
    let file: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
    let mut merged = toml::Table::new();
    for (name, value) in file {
        match (schema.get(&name), value) {
            (Some(keys), toml::Value::Table(entries)) => {
                for (k, v) in entries {
                    if !keys.contains(&k) {
                        return Err(unknown_key(&k, &schema));
                    }
                    section_mut(&mut merged, &name).insert(k, v);
                }
            }
            (Some(_), _) => return Err(CliError::Config(format!("[{name}] must be a table"))),
            (None, v) => {
                let (section, k) = resolve(&name, &schema)?;
                section_mut(&mut merged, &section).insert(k.to_string(), v);
            }
        }
    }
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {o:?} is not key=value")))?;
        let (section, k) = resolve(key.trim(), &schema)?;
        section_mut(&mut merged, &section).insert(k.to_string(), parse_value(raw));
    }
    let text = toml::to_string(&merged).map_err(|e| CliError::Config(e.to_string()))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(type_error(&e, &merged)))?;
    cfg.validate()?;
    Ok(cfg)
}

fn section_mut<'a>(t: &'a mut toml::Table, name: &str) -> &'a mut toml::Table {
    match t.entry(name.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
        toml::Value::Table(s) => s,
        _ => unreachable!("sections are tables"),
    }
}

/// Names the offending key of a deserialization failure when it can be found.
fn type_error(e: &toml::de::Error, merged: &toml::Table) -> String {
    let msg = e.message().to_string();
    let Some(span) = e.span() else { return msg };
    let text = toml::to_string(merged).unwrap_or_default();
    let line = text[..span.start.min(text.len())].lines().last().unwrap_or("");
    match line.split_once('=') {
        Some((k, _)) => format!("{}: {msg}", k.trim()),
        None => msg,
    }
}

/// Writes the fully resolved configuration into `out_dir`.
pub fn write_effective(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let t = &cfg.train;
    let header = format!(
        "# effective lr_peak = {}\n# effective lr_min = {}\n# effective warmup_steps = {}\n\n",
        t.effective_lr_peak(),
        t.effective_lr_min(),
        t.effective_warmup()
    );
    let body = toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let path = out_dir.join(EFFECTIVE_CONFIG_FILE);
    std::fs::write(&path, header + &body).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_globally_unique() {
        let schema = schema();
        let mut seen = std::collections::BTreeSet::new();
        for k in schema.values().flatten() {
            assert!(seen.insert(k.clone()), "duplicate key {k}");
        }
    }

    #[test]
    fn empty_config_is_default() {
        assert_eq!(parse("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn override_wins_over_file() {
        let cfg = parse("[train]\nlr_peak = 0.001\n", &["lr_mult=5".into()]).unwrap();
        assert_eq!(cfg.train.lr_peak, 0.001);
        assert!((cfg.train.effective_lr_peak() - 0.005).abs() < 1e-15);
        let cfg = parse("[train]\nlr_peak = 0.001\n", &["train.lr_peak=0.002".into()]).unwrap();
        assert_eq!(cfg.train.lr_peak, 0.002);
    }

    #[test]
    fn bare_keys_and_strings() {
        let cfg = parse("variant = \"PostNorm\"\n", &["verify_n=[8, 16]".into(), "probe_variants=[\"sdd_pre\"]".into()]).unwrap();
        assert_eq!(cfg.model_config().unwrap().variant, NormVariant::PostNorm);
        assert_eq!(cfg.verify.verify_n, vec![8, 16]);
        let cfg = parse("", &["variant=deep_norm".into()]).unwrap();
        assert_eq!(cfg.model.variant, "deep_norm");
    }

    #[test]
    fn unknown_key_names_nearest() {
        let e = parse("", &["lr_peek=1".into()]).unwrap_err().to_string();
        assert!(e.contains("\"lr_peak\""), "{e}");
        let e = parse("[train]\nlr_peek = 1.0\n", &[]).unwrap_err().to_string();
        assert!(e.contains("\"lr_peak\""), "{e}");
        let e = parse("[trian]\nlr_peak = 1.0\n", &[]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn type_mismatch_names_key() {
        let e = parse("", &["batch=\"many\"".into()]).unwrap_err().to_string();
        assert!(e.contains("batch"), "{e}");
    }

    #[test]
    fn invariants_are_checked() {
        let e = parse("", &["warmup_steps=5000".into()]).unwrap_err().to_string();
        assert!(e.contains("warmup_steps"), "{e}");
        assert!(parse("", &["variant=layer_norm".into()]).is_err());
        assert!(parse("", &["seq_len=1000".into()]).is_err());
        assert!(matches!(parse("", &["novalue".into()]), Err(CliError::Usage(_))));
    }

    #[test]
    fn init_std_override_reaches_model() {
        let cfg = parse("", &["init_std_mult=0.1".into()]).unwrap();
        assert_eq!(cfg.model_config().unwrap().init_std_mult, 0.1);
    }

    #[test]
    fn effective_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse("", &["lr_mult=5".into(), "moe=true".into()]).unwrap();
        write_effective(&cfg, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(EFFECTIVE_CONFIG_FILE)).unwrap();
        let peak: f64 = text.lines().next().unwrap().trim_start_matches("# effective lr_peak = ").parse().unwrap();
        assert!((peak - 0.0015).abs() < 1e-15, "{text}");
        assert_eq!(parse(&text, &[]).unwrap(), cfg);
    }
}
