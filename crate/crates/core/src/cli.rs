//! Command-line driver: `synth`, `train`, `eval`, `explain`, `bands`.
//!
//! Settings come from built-in defaults, then an optional `key = value` file
//! (`--config`), then command-line flags; later sources win. Every command writes
//! the fully resolved settings next to its outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cohort::{generate_cohort, CohortSpec, LabeledCohort};
use crate::config::{Ablation, ModelConfig};
use crate::diffengine::checkpoint;
use crate::error::{Error, Result};
use crate::maskext;
use crate::predictor::Model;
use crate::signal::Band;
use crate::training::{self, Dataset, MetricsReport};

pub const RESOLVED_CONFIG: &str = "resolved.conf";
pub const CHECKPOINT_FILE: &str = "model.sgwt";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const EXPLANATION_FILE: &str = "explanation.json";
pub const BANDS_FILE: &str = "bands.json";

#[derive(Debug, Parser)]
#[command(name = "seegraph", version, about = "Sparse explanatory dynamic EEG-graph classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with planted connectivity.
    Synth(SynthArgs),
    /// Train on a cohort; writes checkpoint, metrics and run log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Export edge saliences for the test split.
    Explain(ExplainArgs),
    /// Train and evaluate once per frequency band.
    Bands(BandsArgs),
}

#[derive(Debug, Args, Default)]
pub struct Shared {
    /// Key-value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[arg(long)]
    pub subjects_per_class: Option<usize>,
    /// `default` or `alpha`.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Cohort directory holding the manifest.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub band: Option<String>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub ablate: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Also write one DOT graph per test subject.
    #[arg(long)]
    pub dot: bool,
}

#[derive(Debug, Args)]
pub struct BandsArgs {
    #[command(flatten)]
    pub shared: Shared,
    #[command(flatten)]
    pub data: DataArgs,
}

/// Every setting a command may read.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub preset: String,
    pub cohort: CohortSpec,
    pub cohort_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub reports_dir: PathBuf,
    pub noise_sigma: f64,
    pub ablate: Option<Ablation>,
    pub top_k: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            preset: "default".into(),
            cohort: CohortSpec::default(),
            cohort_dir: PathBuf::from("cohort"),
            checkpoint: None,
            reports_dir: PathBuf::from("reports"),
            noise_sigma: 0.0,
            ablate: None,
            top_k: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn preset(name: &str) -> Result<CohortSpec> {
    match name {
        "default" => Ok(CohortSpec::default()),
        "alpha" => Ok(CohortSpec::alpha_only()),
        _ => Err(Error::Config(format!("unknown cohort preset '{name}' (default|alpha)"))),
    }
}

impl RunConfig {
    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let v = value.trim();
        match key.trim() {
            "model_dim" => m.model_dim = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "d_pe" => m.d_pe = parse(key, v)?,
            "gat_layers" => m.gat_layers = parse(key, v)?,
            "gat_hidden" => m.gat_hidden = parse(key, v)?,
            "retention" => m.retention = parse(key, v)?,
            "kl_epsilon" => m.kl_epsilon = parse(key, v)?,
            "lambda_kl" => m.lambda_kl = parse(key, v)?,
            "tau_start" => m.tau_start = parse(key, v)?,
            "tau_min" => m.tau_min = parse(key, v)?,
            "tau_decay" => m.tau_decay = parse(key, v)?,
            "eval_tau" => m.eval_tau = parse(key, v)?,
            "zero_threshold" => m.zero_threshold = parse(key, v)?,
            "eval_threshold" => m.eval_threshold = parse(key, v)?,
            "window_seconds" => m.window_seconds = parse(key, v)?,
            "stride_seconds" => m.stride_seconds = parse(key, v)?,
            "band" => m.band = v.parse()?,
            "amplitude" => m.amplitude = v.parse()?,
            "learning_rate" => m.learning_rate = parse(key, v)?,
            "epochs" => m.epochs = parse(key, v)?,
            "batch_size" => m.batch_size = parse(key, v)?,
            "cwise" => m.switches.cwise = parse_bool(key, v)?,
            "pe" => m.switches.pe = parse_bool(key, v)?,
            "sr" => m.switches.sr = parse_bool(key, v)?,
            "fft" => m.switches.fft = parse_bool(key, v)?,
            "seed" => m.seed = parse(key, v)?,
            // resets every cohort setting, so it belongs before them
            "cohort_preset" => {
                self.cohort = preset(v)?;
                self.preset = v.to_string();
            }
            "subjects_per_class" => self.cohort.subjects_per_class = parse(key, v)?,
            "sample_rate_hz" => self.cohort.sample_rate_hz = parse(key, v)?,
            "duration_s" => self.cohort.duration_s = parse(key, v)?,
            "background_noise_std" => self.cohort.background_noise_std = parse(key, v)?,
            "train_fraction" => self.cohort.train_fraction = parse(key, v)?,
            "coupling" => {
                let c: f64 = parse(key, v)?;
                for e in self.cohort.planted.iter_mut().flatten() {
                    e.coupling = c;
                }
            }
            "cohort_dir" => self.cohort_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = optional(key, v)?,
            "reports_dir" => self.reports_dir = PathBuf::from(v),
            "noise_sigma" => self.noise_sigma = parse(key, v)?,
            "ablate" => self.ablate = optional(key, v)?,
            "top_k" => self.top_k = optional(key, v)?,
            other => return Err(Error::Config(format!("unknown setting '{other}'"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    fn apply_pairs(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got '{p}'")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Renders every setting so that `apply_text` reproduces this configuration.
    pub fn render(&self) -> String {
        let m = &self.model;
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let coupling = self.cohort.planted.iter().flatten().map(|e| e.coupling).next().unwrap_or(0.0);
        let rows: Vec<(&str, String)> = vec![
            ("model_dim", m.model_dim.to_string()),
            ("heads", m.heads.to_string()),
            ("d_pe", m.d_pe.to_string()),
            ("gat_layers", m.gat_layers.to_string()),
            ("gat_hidden", m.gat_hidden.to_string()),
            ("retention", m.retention.to_string()),
            ("kl_epsilon", m.kl_epsilon.to_string()),
            ("lambda_kl", m.lambda_kl.to_string()),
            ("tau_start", m.tau_start.to_string()),
            ("tau_min", m.tau_min.to_string()),
            ("tau_decay", m.tau_decay.to_string()),
            ("eval_tau", m.eval_tau.to_string()),
            ("zero_threshold", m.zero_threshold.to_string()),
            ("eval_threshold", m.eval_threshold.to_string()),
            ("window_seconds", m.window_seconds.to_string()),
            ("stride_seconds", m.stride_seconds.to_string()),
            ("band", m.band.to_string()),
            ("amplitude", m.amplitude.to_string()),
            ("learning_rate", m.learning_rate.to_string()),
            ("epochs", m.epochs.to_string()),
            ("batch_size", m.batch_size.to_string()),
            ("cwise", m.switches.cwise.to_string()),
            ("pe", m.switches.pe.to_string()),
            ("sr", m.switches.sr.to_string()),
            ("fft", m.switches.fft.to_string()),
            ("seed", m.seed.to_string()),
            ("cohort_preset", self.preset.clone()),
            ("subjects_per_class", self.cohort.subjects_per_class.to_string()),
            ("sample_rate_hz", self.cohort.sample_rate_hz.to_string()),
            ("duration_s", self.cohort.duration_s.to_string()),
            ("background_noise_std", self.cohort.background_noise_std.to_string()),
            ("train_fraction", self.cohort.train_fraction.to_string()),
            ("coupling", coupling.to_string()),
            ("cohort_dir", self.cohort_dir.display().to_string()),
            ("checkpoint", opt(&self.checkpoint)),
            ("reports_dir", self.reports_dir.display().to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("ablate", self.ablate.map_or("none".into(), |a| a.to_string())),
            ("top_k", self.top_k.map_or("none".into(), |k| k.to_string())),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// The model configuration with the requested ablation applied.
    pub fn effective_model(&self) -> ModelConfig {
        match self.ablate {
            Some(a) => self.model.with_ablation(a),
            None => self.model.clone(),
        }
    }

    fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(RESOLVED_CONFIG), self.render())?;
        Ok(())
    }
}

fn resolve(shared: &Shared, data: Option<&DataArgs>, defaults: Option<&Path>) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(base) = defaults {
        rc.apply_file(base)?;
    }
    if let Some(path) = &shared.config {
        rc.apply_file(path)?;
    }
    if let Some(seed) = shared.seed {
        rc.model.seed = seed;
    }
    if let Some(out) = &shared.out {
        rc.reports_dir = out.clone();
    }
    if let Some(d) = data {
        if let Some(c) = &d.cohort {
            rc.cohort_dir = c.clone();
        }
        if let Some(b) = &d.band {
            rc.model.band = b.parse::<Band>()?;
        }
        if let Some(s) = d.noise_sigma {
            rc.noise_sigma = s;
        }
    }
    rc.apply_pairs(&shared.set)?;
    Ok(rc)
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Usage(format!(
                "{} exists and is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_cohort(rc: &RunConfig) -> Result<LabeledCohort> {
    LabeledCohort::load(&rc.cohort_dir)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| format!("{x:.4}"))
}

/// One `ACC AUROC F1` table row.
pub fn table_row(label: &str, report: Option<&MetricsReport>) -> String {
    format!(
        "{label:<10} {:>8} {:>8} {:>8}",
        fmt_opt(report.map(|r| r.accuracy)),
        fmt_opt(report.map(|r| r.macro_auroc)),
        fmt_opt(report.map(|r| r.macro_f1))
    )
}

fn table_header() -> String {
    format!("{:<10} {:>8} {:>8} {:>8}", "run", "ACC", "AUROC", "F1")
}

fn cmd_synth(args: &SynthArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut rc = resolve(&args.shared, None, None)?;
    if let Some(p) = &args.preset {
        rc.set("cohort_preset", p)?;
    }
    if let Some(n) = args.subjects_per_class {
        rc.cohort.subjects_per_class = n;
    }
    if let Some(o) = &args.shared.out {
        rc.cohort_dir = o.clone();
    }
    let cohort = generate_cohort(&rc.cohort, rc.model.seed)?;
    prepare_dir(&rc.cohort_dir, args.shared.force)?;
    cohort.write(&rc.cohort_dir)?;
    rc.write_resolved(&rc.cohort_dir)?;
    let train = cohort.indices(crate::signal::io::Split::Train).len();
    writeln!(
        out,
        "wrote {} subjects ({} train, {} test) in {} classes to {}",
        cohort.recordings.len(),
        train,
        cohort.recordings.len() - train,
        cohort.n_classes,
        rc.cohort_dir.display()
    )?;
    Ok(())
}

fn cmd_train(args: &TrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut rc = resolve(&args.shared, Some(&args.data), None)?;
    if let Some(a) = &args.ablate {
        rc.ablate = Some(a.parse()?);
    }
    let model_cfg = rc.effective_model();
    model_cfg.validate()?;
    let cohort = load_cohort(&rc)?;
    let data = Dataset::prepare(&cohort, &model_cfg, rc.noise_sigma)?;
    prepare_dir(&rc.reports_dir, args.shared.force)?;
    let outcome = training::train_dataset(&data, &model_cfg)?;
    let ckpt = rc.reports_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&outcome.model.params, &ckpt)?;
    rc.checkpoint = Some(ckpt);
    write_json(&rc.reports_dir.join(METRICS_FILE), &outcome.report)?;
    let mut log = String::new();
    for line in &outcome.log {
        log.push_str(&serde_json::to_string(line)?);
        log.push('\n');
    }
    fs::write(rc.reports_dir.join(RUN_LOG_FILE), log)?;
    rc.write_resolved(&rc.reports_dir)?;
    writeln!(out, "{}", table_header())?;
    writeln!(out, "{}", table_row("test", Some(&outcome.report)))?;
    Ok(())
}

/// Rebuilds the trained model: settings resolved next to the checkpoint, then the
/// command's own config file and flags.
fn load_model(
    shared: &Shared,
    data: &DataArgs,
    checkpoint_flag: Option<&PathBuf>,
) -> Result<(RunConfig, LabeledCohort, Dataset, Model)> {
    let pre = resolve(shared, Some(data), None)?;
    let ckpt = checkpoint_flag
        .cloned()
        .or(pre.checkpoint.clone())
        .ok_or_else(|| Error::Usage("no checkpoint given (--checkpoint)".into()))?;
    if !ckpt.is_file() {
        return Err(Error::Usage(format!("checkpoint {} not found", ckpt.display())));
    }
    let beside = ckpt.parent().map(|d| d.join(RESOLVED_CONFIG)).filter(|p| p.is_file());
    let mut rc = resolve(shared, Some(data), beside.as_deref())?;
    // The training run's output directory is not this command's.
    if shared.out.is_none() {
        rc.reports_dir = RunConfig::default().reports_dir;
    }
    rc.checkpoint = Some(ckpt.clone());
    let model_cfg = rc.effective_model();
    let cohort = load_cohort(&rc)?;
    let dataset = Dataset::prepare(&cohort, &model_cfg, rc.noise_sigma)?;
    let mut model = Model::new(&model_cfg, dataset.feature_dim(), dataset.n_classes)?;
    let loaded = checkpoint::load(&ckpt)?;
    checkpoint::restore_into(&mut model.params, &loaded)?;
    Ok((rc, cohort, dataset, model))
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let (rc, _, data, model) = load_model(&args.shared, &args.data, args.checkpoint.as_ref())?;
    let eval = training::evaluate(&model, &data)?;
    prepare_dir(&rc.reports_dir, args.shared.force)?;
    write_json(&rc.reports_dir.join(METRICS_FILE), &eval.report)?;
    rc.write_resolved(&rc.reports_dir)?;
    writeln!(out, "{}", table_header())?;
    writeln!(out, "{}", table_row("test", Some(&eval.report)))?;
    Ok(())
}

fn cmd_explain(args: &ExplainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let (mut rc, _, data, model) = load_model(&args.shared, &args.data, args.checkpoint.as_ref())?;
    if let Some(k) = args.top_k {
        rc.top_k = Some(k);
    }
    let export = training::explain(&model, &data, rc.top_k).map_err(|e| match e {
        Error::Config(msg) => Error::Usage(msg),
        other => other,
    })?;
    prepare_dir(&rc.reports_dir, args.shared.force)?;
    write_json(&rc.reports_dir.join(EXPLANATION_FILE), &export)?;
    if args.dot {
        let dir = rc.reports_dir.join("dot");
        fs::create_dir_all(&dir)?;
        let k = rc.top_k.unwrap_or(data.planted_k().unwrap_or(10));
        for s in &export.subjects {
            fs::write(dir.join(format!("{}.dot", s.subject_id)), maskext::to_dot(s, &data.channels, k))?;
        }
    }
    rc.write_resolved(&rc.reports_dir)?;
    match (export.top_k, export.precision_at_k) {
        (Some(k), Some(p)) => writeln!(out, "precision@{k} = {p:.4} over {} test subjects", export.subjects.len())?,
        _ => writeln!(out, "explained {} test subjects", export.subjects.len())?,
    }
    Ok(())
}

fn cmd_bands(args: &BandsArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let rc = resolve(&args.shared, Some(&args.data), None)?;
    let model_cfg = rc.effective_model();
    model_cfg.validate()?;
    let cohort = load_cohort(&rc)?;
    prepare_dir(&rc.reports_dir, args.shared.force)?;
    let rows = training::band_sweep(&cohort, &model_cfg, rc.noise_sigma)?;
    write_json(&rc.reports_dir.join(BANDS_FILE), &rows)?;
    rc.write_resolved(&rc.reports_dir)?;
    writeln!(out, "{}", table_header())?;
    for row in &rows {
        writeln!(out, "{}", table_row(row.band.name(), row.report.as_ref()))?;
    }
    Ok(())
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Explain(a) => cmd_explain(a, out),
        Command::Bands(a) => cmd_bands(a, out),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 1;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
