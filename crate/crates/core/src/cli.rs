//! The `logcoral` command line.
//!
//! Exit codes: 0 on success, 1 when a check or training run fails, 2 for
//! usage and I/O errors. Options can also come from a flat `key=value`
//! config file (`--config`); flags given on the command line win.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::data::{generate, load_csv, save_csv, DataSource, ShiftKind, ShiftSpec};
use crate::error::Error;
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::linalg::sym_eig;
use crate::losses::{coral_loss, logcoral_loss_regularized, mean_loss, LossWeights, Regularization};
use crate::network::{evaluate, Activation, Checkpoint, MetricRecord, TrainConfig, TrainState};
use crate::statistics::{batch_covariance, batch_mean, DEFAULT_STATS_MOMENTUM};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "logcoral", version, about = "Correlation-alignment losses for domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic source/target pair as CSV files.
    Generate(GenerateArgs),
    /// Compute CORAL, LogCORAL and mean losses between two feature files.
    Losses(LossesArgs),
    /// Check analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the classifier with alignment losses.
    Train(TrainArgs),
    /// Train every loss configuration over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        <Format as ValueEnum>::from_str(s, false)
            .map_err(|_| Error::invalid(format!("unknown format '{s}'")))
    }
}

#[derive(Debug, Args, Default)]
struct CommonArgs {
    /// Flat key=value config file; '#' starts a comment.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Loss weights, e.g. cls=1,logcoral=1,mean=1.
    #[arg(long)]
    weights: Option<String>,
    /// Covariance regularization relative to the mean diagonal entry.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Momentum of the moving-average statistics.
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    shift: Option<String>,
    #[arg(long)]
    samples_per_class: Option<usize>,
}

#[derive(Debug, Args)]
struct LossesArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "CSV")]
    source: PathBuf,
    #[arg(long, value_name = "CSV")]
    target: PathBuf,
    /// The last column of each file is a label and is ignored.
    #[arg(long)]
    labels: bool,
    /// Shorthand for --format json.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, hide = true)]
    corrupt_target_sign: bool,
}

#[derive(Debug, Args, Default)]
struct TrainOpts {
    /// Synthetic shift preset: benchmark, none, translation, scale, rotation.
    #[arg(long)]
    shift: Option<String>,
    /// Labeled source features (CSV) instead of synthetic data.
    #[arg(long, value_name = "CSV", requires = "target_csv")]
    source_csv: Option<PathBuf>,
    #[arg(long, value_name = "CSV", requires = "source_csv")]
    target_csv: Option<PathBuf>,
    /// The target CSV has a label column used for evaluation.
    #[arg(long)]
    target_labels: bool,
    /// Hidden layer widths, e.g. 128,64.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    sgd_momentum: Option<f64>,
    #[arg(long)]
    cov_tap: Option<String>,
    #[arg(long)]
    mean_tap: Option<String>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Classification-only steps on the source before alignment starts.
    #[arg(long)]
    warmup: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    opts: TrainOpts,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    opts: TrainOpts,
    /// Number of seeds per cell.
    #[arg(long)]
    seeds: Option<u64>,
    /// Comma-separated shift presets, one table column each.
    #[arg(long)]
    shifts: Option<String>,
}

/// Failure of a command with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn failure(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NumericalFailure(_) | Error::NotPositiveDefinite { .. } => EXIT_FAILURE,
            Error::InvalidInput(_) | Error::Parse { .. } | Error::Io { .. } => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Options from the config file, consumed key by key.
struct Settings {
    file: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let f = File::open(path).map_err(|e| CliError::from(Error::io(path, e)))?;
            for (idx, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| CliError::from(Error::io(path, e)))?;
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::usage(format!("{}:{}: expected key=value", path.display(), idx + 1))
                })?;
                file.insert(k.trim().replace('-', "_"), v.trim().to_string());
            }
        }
        Ok(Self { file })
    }

    /// Flag value, else config-file value, else `default`.
    fn get<T: FromStr>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T> {
        let from_file = self.file.remove(key);
        if let Some(v) = flag {
            return Ok(v);
        }
        match from_file {
            Some(raw) => raw
                .parse()
                .map_err(|_| CliError::usage(format!("config key '{key}': cannot parse '{raw}'"))),
            None => Ok(default),
        }
    }

    fn get_opt<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>> {
        let from_file = self.file.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        from_file
            .map(|raw| {
                raw.parse()
                    .map_err(|_| CliError::usage(format!("config key '{key}': cannot parse '{raw}'")))
            })
            .transpose()
    }

    /// Rejects config keys no option consumed.
    fn finish(self) -> CliResult {
        match self.file.keys().next() {
            Some(k) => Err(CliError::usage(format!("unknown config key '{k}'"))),
            None => Ok(()),
        }
    }
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> CliResult<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::usage(format!("invalid {what} '{s}'"))))
        .collect()
}

fn parse_shift(raw: &str) -> CliResult<ShiftKind> {
    raw.parse().map_err(CliError::from)
}

/// Runs the CLI on `args` (including the program name) and returns the
/// exit code. Reports go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Losses(a) => cmd_losses(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::from(Error::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::usage(format!("cannot write output: {e}")))
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> CliResult {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let seed = s.get("seed", a.common.seed, 0)?;
    let shift = parse_shift(&s.get("shift", a.shift, "benchmark".to_string())?)?;
    let samples = s.get_opt("samples_per_class", a.samples_per_class)?;
    let dir = s.get("out", a.common.out, PathBuf::from("."))?;
    s.finish()?;

    let mut spec = ShiftSpec::preset(shift, seed);
    if let Some(n) = samples {
        spec.samples_per_class = n;
    }
    let pair = generate(&spec)?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let (sp, tp) = (dir.join("source.csv"), dir.join("target.csv"));
    save_csv(&sp, &pair.source)?;
    save_csv(&tp, &pair.target)?;
    emit(out, &format!("wrote {} and {}\n", sp.display(), tp.display()))
}

#[derive(Debug, Serialize)]
struct LossesReport {
    coral: f64,
    logcoral: f64,
    mean: f64,
    condition_source: f64,
    condition_target: f64,
    epsilon: f64,
}

fn condition_number(m: &crate::linalg::SymmetricMatrix, epsilon: f64) -> Result<f64, Error> {
    let eig = sym_eig(&m.shift_diagonal(epsilon))?;
    let lo = eig.values[0];
    let hi = eig.values[eig.dim() - 1];
    Ok(if lo > 0.0 { hi / lo } else { f64::INFINITY })
}

fn cmd_losses(a: LossesArgs, out: &mut dyn Write) -> CliResult {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let epsilon = s.get("epsilon", a.common.epsilon, crate::linalg::DEFAULT_RELATIVE_EPSILON)?;
    let flag_format = if a.json { Some(Format::Json) } else { a.common.format };
    let format = s.get("format", flag_format, Format::Text)?;
    s.finish()?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(CliError::usage(format!("--epsilon must be positive, got {epsilon}")));
    }

    let source = load_csv(&a.source, a.labels)?;
    let target = load_csv(&a.target, a.labels)?;
    let cs = batch_covariance(&source)?;
    let ct = batch_covariance(&target)?;
    let reg = Regularization::Relative(epsilon);
    let report = LossesReport {
        coral: coral_loss(&cs, &ct)?.value,
        logcoral: logcoral_loss_regularized(&cs, &ct, reg)?.value,
        mean: mean_loss(&batch_mean(&source).view(), &batch_mean(&target).view())?.value,
        condition_source: condition_number(&cs, reg.epsilon_for(&cs))?,
        condition_target: condition_number(&ct, reg.epsilon_for(&ct))?,
        epsilon,
    };
    let text = match format {
        Format::Json => format!("{}\n", serde_json::to_string(&report).unwrap()),
        Format::Csv => format!(
            "coral,logcoral,mean,condition_source,condition_target\n{},{},{},{},{}\n",
            report.coral, report.logcoral, report.mean, report.condition_source, report.condition_target
        ),
        Format::Text => format!(
            "L_CORAL     {:.6e}\nL_LogCORAL  {:.6e}\nL_mean      {:.6e}\ncond(C_S)   {:.4e}\ncond(C_T)   {:.4e}\n",
            report.coral, report.logcoral, report.mean, report.condition_source, report.condition_target
        ),
    };
    emit(out, &text)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let defaults = GradcheckConfig::default();
    let config = GradcheckConfig {
        seed: s.get("seed", a.common.seed, defaults.seed)?,
        dim: s.get("dim", a.dim, defaults.dim)?,
        trials: s.get("trials", a.trials, defaults.trials)?,
        corrupt_target_sign: a.corrupt_target_sign,
        ..defaults
    };
    let format = s.get("format", a.common.format, Format::Text)?;
    let dir = s.get("out", a.common.out, PathBuf::from("."))?;
    s.finish()?;

    let results = run_gradcheck(&config)?;
    let mut text = String::new();
    match format {
        Format::Json => {
            let rows: Vec<_> = results
                .iter()
                .map(|r| json!({"loss": r.name, "max_relative_error": r.max_relative_error, "tolerance": r.tolerance, "passed": r.passed}))
                .collect();
            writeln!(text, "{}", serde_json::Value::Array(rows)).unwrap();
        }
        Format::Csv => {
            writeln!(text, "loss,max_relative_error,tolerance,passed").unwrap();
            for r in &results {
                writeln!(text, "{},{:e},{:e},{}", r.name, r.max_relative_error, r.tolerance, r.passed).unwrap();
            }
        }
        Format::Text => {
            for r in &results {
                writeln!(
                    text,
                    "{:<24} max rel err {:.3e}  tol {:.0e}  {}",
                    r.name,
                    r.max_relative_error,
                    r.tolerance,
                    if r.passed { "PASS" } else { "FAIL" }
                )
                .unwrap();
            }
        }
    }
    emit(out, &text)?;

    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let dump = dir.join("gradcheck_failure.json");
    let body = json!({
        "seed": config.seed,
        "dim": config.dim,
        "failures": failed.iter().map(|r| json!({
            "loss": r.name,
            "max_relative_error": r.max_relative_error,
            "input": r.worst_input,
        })).collect::<Vec<_>>(),
    });
    fs::write(&dump, serde_json::to_string_pretty(&body).unwrap()).map_err(io_err(&dump))?;
    Err(CliError::failure(format!(
        "gradient check failed for {}; worst inputs written to {}",
        failed.iter().map(|r| r.name.as_str()).collect::<Vec<_>>().join(", "),
        dump.display()
    )))
}

/// Resolves the training options shared by `train` and `ablate`.
fn train_config(
    s: &mut Settings,
    common: &CommonArgs,
    opts: &TrainOpts,
    base_weights: LossWeights,
) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let seed = s.get("seed", common.seed, d.seed)?;
    let weight_spec = s.get_opt("weights", common.weights.clone())?;
    let weights = match weight_spec {
        Some(spec) => base_weights.with_overrides(&spec)?,
        None => base_weights,
    };
    let hidden = match s.get_opt("hidden", opts.hidden.clone())? {
        Some(raw) => parse_list(&raw, "hidden width")?,
        None => d.hidden.clone(),
    };
    let shift = parse_shift(&s.get("shift", opts.shift.clone(), "benchmark".to_string())?)?;
    let source_csv = s.get_opt("source_csv", opts.source_csv.clone())?;
    let target_csv = s.get_opt("target_csv", opts.target_csv.clone())?;
    let target_labels = s.get("target_labels", opts.target_labels.then_some(true), false)?;
    let data = match (source_csv, target_csv) {
        (Some(source), Some(target)) => DataSource::Csv {
            source,
            target,
            target_labels,
        },
        (None, None) => DataSource::Synthetic { shift, seed },
        _ => return Err(CliError::usage("source_csv and target_csv must be given together")),
    };
    let config = TrainConfig {
        data,
        hidden,
        activation: Activation::Relu,
        learning_rate: s.get("lr", common.lr, d.learning_rate)?,
        sgd_momentum: s.get("sgd_momentum", opts.sgd_momentum, d.sgd_momentum)?,
        stats_momentum: s.get("momentum", common.momentum, DEFAULT_STATS_MOMENTUM)?,
        epsilon: s.get("epsilon", common.epsilon, d.epsilon)?,
        batch_size: s.get("batch", common.batch, d.batch_size)?,
        steps: s.get("steps", common.steps, d.steps)?,
        warmup_steps: s.get("warmup", opts.warmup, d.warmup_steps)?,
        weights,
        cov_tap: s.get("cov_tap", opts.cov_tap.clone(), d.cov_tap.clone())?,
        mean_tap: s.get("mean_tap", opts.mean_tap.clone(), d.mean_tap.clone())?,
        eval_every: s.get("eval_every", opts.eval_every, d.eval_every)?,
        seed,
    };
    config.validate()?;
    Ok(config)
}

/// Keeps the first `keep` lines of an existing metric log.
fn truncate_metrics(path: &Path, last_step: u64) -> CliResult {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines() {
        let rec: MetricRecord = serde_json::from_str(line)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        if rec.step <= last_step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(io_err(path))
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let dir = s.get("out", a.common.out.clone(), PathBuf::from("."))?;
    let format = s.get("format", a.common.format, Format::Text)?;

    let (mut state, data) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let steps = s.get("steps", a.common.steps, ckpt.config.steps)?;
            s.finish()?;
            let data = ckpt.config.data.load()?;
            let mut state = TrainState::from_checkpoint(ckpt)?;
            state.set_total_steps(steps);
            (state, data)
        }
        None => {
            let config = train_config(&mut s, &a.common, &a.opts, LossWeights::default())?;
            s.finish()?;
            let data = config.data.load()?;
            (TrainState::for_dataset(config, &data)?, data)
        }
    };

    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let metrics_path = dir.join("metrics.jsonl");
    let ckpt_path = dir.join("checkpoint.json");
    let file = if a.resume.is_some() {
        truncate_metrics(&metrics_path, state.step())?;
        OpenOptions::new().create(true).append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(io_err(&metrics_path))?;
    let mut log = std::io::BufWriter::new(file);

    let mut write_err = None;
    let outcome = state.run(&data, |rec| {
        if write_err.is_none() {
            if let Err(e) = writeln!(log, "{}", rec.to_json_line()) {
                write_err = Some(e);
            }
        }
    });
    log.flush().map_err(io_err(&metrics_path))?;
    if let Some(e) = write_err {
        return Err(io_err(&metrics_path)(e));
    }
    state.checkpoint().save(&ckpt_path)?;
    if let Err(e) = outcome {
        return Err(CliError {
            code: EXIT_FAILURE,
            message: format!(
                "{e}; last good state (step {}) saved to {}",
                state.step(),
                ckpt_path.display()
            ),
        });
    }

    let acc = data
        .target
        .labels()
        .map(|_| evaluate(state.model(), &data.target))
        .transpose()?;
    let summary = json!({
        "steps": state.step(),
        "target_acc": acc,
        "metrics": metrics_path,
        "checkpoint": ckpt_path,
    });
    let text = match format {
        Format::Json => format!("{summary}\n"),
        Format::Csv => format!(
            "steps,target_acc\n{},{}\n",
            state.step(),
            acc.map_or(String::new(), |a| a.to_string())
        ),
        Format::Text => format!(
            "trained {} steps; target accuracy {}\nmetrics: {}\ncheckpoint: {}\n",
            state.step(),
            acc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
            metrics_path.display(),
            ckpt_path.display()
        ),
    };
    emit(out, &text)
}

/// Loss configurations compared by `ablate`, as (name, enabled losses).
pub const ABLATION_METHODS: [(&str, &[&str]); 6] = [
    ("baseline", &[]),
    ("coral", &["coral"]),
    ("logcoral", &["logcoral"]),
    ("mean", &["mean"]),
    ("coral+mean", &["coral", "mean"]),
    ("logcoral+mean", &["logcoral", "mean"]),
];

/// Weights of one ablation method: losses outside `enabled` are zeroed.
pub fn method_weights(base: LossWeights, enabled: &[&str]) -> LossWeights {
    let on = |k: &str, w: f64| if enabled.contains(&k) { w } else { 0.0 };
    LossWeights {
        classification: base.classification,
        coral: on("coral", base.coral),
        logcoral: on("logcoral", base.logcoral),
        mean: on("mean", base.mean),
    }
}

/// Summary of one (method, shift) cell.
#[derive(Clone, Debug, Serialize)]
pub struct AblationCell {
    pub method: String,
    pub shift: String,
    pub accuracies: Vec<f64>,
    pub failures: Vec<String>,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

fn summarize(method: &str, shift: &str, runs: Vec<Result<f64, String>>) -> AblationCell {
    let mut accuracies = Vec::new();
    let mut failures = Vec::new();
    for r in runs {
        match r {
            Ok(a) => accuracies.push(a),
            Err(e) => failures.push(e),
        }
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = if accuracies.len() > 1 {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = accuracies.clone();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => f64::NAN,
        m if m % 2 == 1 => sorted[m / 2],
        m => 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]),
    };
    AblationCell {
        method: method.into(),
        shift: shift.into(),
        accuracies,
        failures,
        mean,
        std,
        median,
    }
}

/// Final target accuracy of one training run.
pub fn final_accuracy(config: TrainConfig) -> Result<f64, Error> {
    let data = config.data.load()?;
    let mut state = TrainState::for_dataset(config, &data)?;
    state.run(&data, |_| {})?;
    evaluate(state.model(), &data.target)
}

/// Runs every method on every shift for `seeds` seeds starting at
/// `base.seed`. Cells run in parallel; each has its own state.
pub fn run_ablation(base: &TrainConfig, shifts: &[ShiftKind], seeds: u64) -> Vec<AblationCell> {
    let jobs: Vec<(usize, usize, u64)> = (0..ABLATION_METHODS.len())
        .flat_map(|m| (0..shifts.len()).flat_map(move |s| (0..seeds).map(move |k| (m, s, k))))
        .collect();
    let results: Vec<Result<f64, String>> = jobs
        .par_iter()
        .map(|&(m, s, k)| {
            let seed = base.seed + k;
            let config = TrainConfig {
                data: DataSource::Synthetic {
                    shift: shifts[s],
                    seed,
                },
                weights: method_weights(base.weights, ABLATION_METHODS[m].1),
                seed,
                ..base.clone()
            };
            final_accuracy(config).map_err(|e| e.to_string())
        })
        .collect();
    let mut results = results.into_iter();
    let mut cells = Vec::new();
    for (name, _) in ABLATION_METHODS {
        for shift in shifts {
            let runs: Vec<_> = results.by_ref().take(seeds as usize).collect();
            cells.push(summarize(name, shift.name(), runs));
        }
    }
    cells
}

fn render_ablation(cells: &[AblationCell], shifts: &[ShiftKind], format: Format) -> String {
    let mut text = String::new();
    match format {
        Format::Json => {
            writeln!(text, "{}", serde_json::to_string(cells).unwrap()).unwrap();
        }
        Format::Csv => {
            writeln!(text, "method,shift,mean,std,median,runs,failures").unwrap();
            for c in cells {
                writeln!(
                    text,
                    "{},{},{},{},{},{},{}",
                    c.method,
                    c.shift,
                    c.mean,
                    c.std,
                    c.median,
                    c.accuracies.len(),
                    c.failures.len()
                )
                .unwrap();
            }
        }
        Format::Text => {
            write!(text, "{:<16}", "method").unwrap();
            for s in shifts {
                write!(text, "{:>22}", s.name()).unwrap();
            }
            writeln!(text).unwrap();
            for chunk in cells.chunks(shifts.len()) {
                write!(text, "{:<16}", chunk[0].method).unwrap();
                for c in chunk {
                    let cell = if c.accuracies.is_empty() {
                        "FAILED".to_string()
                    } else {
                        let mark = if c.failures.is_empty() { "" } else { "*" };
                        format!("{:.2} ± {:.2}{mark}", 100.0 * c.mean, 100.0 * c.std)
                    };
                    write!(text, "{cell:>22}").unwrap();
                }
                writeln!(text).unwrap();
            }
        }
    }
    text
}

fn cmd_ablate(a: AblateArgs, out: &mut dyn Write) -> CliResult {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let format = s.get("format", a.common.format, Format::Text)?;
    let dir = s.get_opt("out", a.common.out.clone())?;
    let seeds = s.get("seeds", a.seeds, 5)?;
    let shifts: Vec<ShiftKind> = match s.get_opt("shifts", a.shifts.clone())? {
        Some(raw) => raw.split(',').map(str::trim).map(parse_shift).collect::<CliResult<_>>()?,
        None => vec![ShiftKind::Benchmark],
    };
    // Every alignment loss a method enables gets weight 1 unless overridden.
    let base_weights = LossWeights {
        classification: 1.0,
        coral: 1.0,
        logcoral: 1.0,
        mean: 1.0,
    };
    let config = train_config(&mut s, &a.common, &a.opts, base_weights)?;
    s.finish()?;
    if seeds == 0 || shifts.is_empty() {
        return Err(CliError::usage("need at least one seed and one shift"));
    }
    if matches!(config.data, DataSource::Csv { .. }) {
        return Err(CliError::usage("ablate runs on synthetic shifts only"));
    }

    let cells = run_ablation(&config, &shifts, seeds);
    let text = render_ablation(&cells, &shifts, format);
    if let Some(dir) = dir {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let ext = match format {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Text => "txt",
        };
        let path = dir.join(format!("ablation.{ext}"));
        fs::write(&path, &text).map_err(io_err(&path))?;
    }
    emit(out, &text)?;
    let failed: usize = cells.iter().map(|c| c.failures.len()).sum();
    if failed > 0 {
        return Err(CliError::failure(format!("{failed} ablation runs failed")));
    }
    Ok(())
}
