//! `fld`: generate, split, train, search, evaluate, export and benchmark.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use fld::data::{DataError, TaskKind};
use fld::model::{CurveKind, ModelError};
use fld::train::TrainError;

#[derive(Debug, Parser)]
#[command(name = "fld", version, about = "Latent-curve forecasting of irregular time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a Goodwin oscillator dataset.
    Generate(GenerateArgs),
    /// Cut raw series into observation/forecast instances.
    Split(SplitArgs),
    /// Train one model on one fold.
    Train(TrainArgs),
    /// Random hyperparameter search on one fold.
    Search(SearchArgs),
    /// Pooled MSE of a checkpoint on a split.
    Eval(EvalArgs),
    /// Export per-query predictions as CSV.
    Predict(PredictArgs),
    /// Time full-split inference.
    Bench(BenchArgs),
    /// Compare backpropagated gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// JSON file of flag values; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FoldArgs {
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value = "linear", value_parser = parse_curve)]
    pub curve: CurveKind,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Embedding size per head.
    #[arg(long, default_value_t = 4)]
    pub embed: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub l2: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 300)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 30)]
    pub patience: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Observation times per series.
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    /// Log-normal noise scale.
    #[arg(long, default_value_t = 0.01)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub drop: f64,
    /// Relative half-width of the parameter ranges.
    #[arg(long, default_value_t = 0.5)]
    pub spread: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_task)]
    pub task: TaskKind,
    /// Keep each observed scalar with this probability.
    #[arg(long)]
    pub keep: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub fold: FoldArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "linear", value_parser = parse_curve)]
    pub curve: CurveKind,
    #[arg(long, default_value_t = 10)]
    pub budget: usize,
    #[command(flatten)]
    pub fold: FoldArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub passes: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "sine", value_parser = parse_curve)]
    pub curve: CurveKind,
    #[arg(long, default_value_t = 2)]
    pub channels: usize,
    #[arg(long, default_value_t = 12)]
    pub observations: usize,
    #[arg(long, default_value_t = 4)]
    pub queries: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub embed: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

fn parse_curve(s: &str) -> Result<CurveKind, String> {
    s.parse()
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse()
}

/// Bad flags, inputs or configuration (exit code 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            if !matches!(e, DataError::Io { .. } | DataError::Tensor(_)) {
                return 1;
            }
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            if matches!(e, ModelError::Config(_) | ModelError::Checkpoint { .. }) {
                return 1;
            }
        }
        if let Some(TrainError::Config(_)) = cause.downcast_ref::<TrainError>() {
            return 1;
        }
    }
    2
}

fn config_value(v: &serde_json::Value) -> anyhow::Result<Option<String>> {
    Ok(match v {
        serde_json::Value::Bool(true) => Some(String::new()),
        serde_json::Value::Bool(false) | serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        other => bail!(usage(format!("unsupported config value {other}"))),
    })
}

/// Appends values from `--config` for every flag not given on the command
/// line, then parses again.
fn merge_config(mut argv: Vec<OsString>) -> anyhow::Result<Cli> {
    let matches = Cli::command().try_get_matches_from(&argv)?;
    let Some((name, sub)) = matches.subcommand() else {
        return Ok(Cli::from_arg_matches(&matches)?);
    };
    let Some(path) = sub.get_one::<PathBuf>("config") else {
        return Ok(Cli::from_arg_matches(&matches)?);
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let cmd = Cli::command();
    let sub_cmd = cmd
        .find_subcommand(name)
        .expect("matched subcommand exists");
    for (key, value) in &map {
        let id = key.replace('-', "_");
        let Some(arg) = sub_cmd.get_arguments().find(|a| a.get_id() == id.as_str()) else {
            bail!(usage(format!("config {}: unknown key {key:?}", path.display())));
        };
        if id == "config" || sub.value_source(&id) == Some(ValueSource::CommandLine) {
            continue;
        }
        let long = arg.get_long().expect("every flag is long");
        if let Some(v) = config_value(value)? {
            argv.push(format!("--{long}").into());
            if !v.is_empty() || !value.is_boolean() {
                argv.push(v.into());
            }
        }
    }
    let matches = Cli::command().try_get_matches_from(&argv)?;
    Ok(Cli::from_arg_matches(&matches)?)
}

fn main() -> ExitCode {
    let cli = match merge_config(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(err) => {
            if let Some(clap_err) = err.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                return match clap_err.kind() {
                    clap::error::ErrorKind::DisplayHelp
                    | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                    _ => ExitCode::from(1),
                };
            }
            eprintln!("error: {err:#}");
            return ExitCode::from(exit_code(&err));
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Search(a) => commands::search(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
