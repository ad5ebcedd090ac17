mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridsr::models::{Architecture, TilingMode};
use gridsr::training::SamplingMode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or input; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] gridsr::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use gridsr::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::Geometry(_)
                | E::Shape(_)
                | E::Domain(_)
                | E::OutOfSplit { .. }
                | E::Alignment { .. }
                | E::NonFinite { .. }
                | E::Ingestion(_)
                | E::Coverage { .. }
                | E::NetCdf { .. }
                | E::Checkpoint(_) => 2,
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gridsr", version, about = "Super-resolution downscaling of gridded temperature")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for inference.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,
    /// Leave creation timestamps out of every output.
    #[arg(long, global = true)]
    pub reproducible: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic LR/HR dataset.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and history.
    Train(TrainArgs),
    /// Downscale an LR series with a checkpoint.
    Downscale(DownscaleArgs),
    /// Compare prediction series against a reference.
    Evaluate(EvaluateArgs),
    /// Downscale the test split with several checkpoints and evaluate them.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (overrides `data_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub scale: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (overrides `data_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<Architecture>,
    #[arg(long)]
    pub mode: Option<TilingMode>,
    #[arg(long)]
    pub preset: Option<config::Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = parse_sampling)]
    pub sampling: Option<SamplingMode>,
    #[arg(long)]
    pub samples_per_epoch: Option<usize>,
    /// Continue training from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DownscaleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// LR NetCDF series.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory with `lr_covariates.nc` and `hr_covariates.nc`; defaults to
    /// the input's directory.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// HR reference series.
    #[arg(long)]
    pub reference: PathBuf,
    /// Prediction series as `NAME=PATH`; repeatable.
    #[arg(long = "prediction", required = true, value_parser = parse_named)]
    pub predictions: Vec<(String, PathBuf)>,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to one split of the configured time split.
    #[arg(long, value_parser = ["train", "validation", "test"])]
    pub split: Option<String>,
    /// Timestamp for a case-study panel, e.g. `2020-01-13T00`; repeatable.
    #[arg(long = "case-study", value_parser = parse_time)]
    pub case_study: Vec<chrono::DateTime<chrono::Utc>>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Checkpoint as `PATH` or `NAME=PATH`; repeatable.
    #[arg(long = "checkpoint", required = true, value_parser = parse_checkpoint)]
    pub checkpoints: Vec<(String, PathBuf)>,
    /// Dataset directory (overrides `data_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "case-study", value_parser = parse_time)]
    pub case_study: Vec<chrono::DateTime<chrono::Utc>>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

fn parse_sampling(s: &str) -> Result<SamplingMode, String> {
    match s {
        "uniform" => Ok(SamplingMode::Uniform),
        "weighted" => Ok(SamplingMode::Weighted),
        _ => Err(format!("unknown sampling `{s}` (uniform, weighted)")),
    }
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got `{s}`"))?;
    if name.is_empty() || path.is_empty() {
        return Err(format!("expected NAME=PATH, got `{s}`"));
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn parse_checkpoint(s: &str) -> Result<(String, PathBuf), String> {
    if s.contains('=') {
        return parse_named(s);
    }
    let path = PathBuf::from(s);
    let name = path.file_stem().and_then(|n| n.to_str()).ok_or_else(|| format!("cannot name checkpoint `{s}`"))?;
    Ok((name.to_string(), path))
}

/// Accepts `YYYY-mm-ddTHH`, `YYYY-mm-ddTHH:MM` and RFC 3339.
pub fn parse_time(s: &str) -> Result<chrono::DateTime<chrono::Utc>, String> {
    use chrono::{NaiveDateTime, TimeZone, Utc};
    if let Ok(t) = chrono::DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for (fmt, suffix) in [("%Y-%m-%dT%H:%M", ":00"), ("%Y-%m-%dT%H:%M", "")] {
        if let Ok(t) = NaiveDateTime::parse_from_str(&format!("{s}{suffix}"), fmt) {
            return Ok(Utc.from_utc_datetime(&t));
        }
    }
    Err(format!("cannot parse timestamp `{s}`"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&cli.global, a),
        Command::Train(a) => commands::train(&cli.global, a),
        Command::Downscale(a) => commands::downscale(&cli.global, a),
        Command::Evaluate(a) => commands::evaluate(&cli.global, a),
        Command::Report(a) => commands::report(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamps_parse_in_short_and_full_forms() {
        let a = parse_time("2020-01-13T00").unwrap();
        assert_eq!(a, parse_time("2020-01-13T00:00").unwrap());
        assert_eq!(a, parse_time("2020-01-13T00:00:00Z").unwrap());
        assert!(parse_time("13/01/2020").is_err());
    }

    #[test]
    fn named_arguments() {
        assert_eq!(parse_named("swin=a/b.nc").unwrap(), ("swin".to_string(), PathBuf::from("a/b.nc")));
        assert!(parse_named("a.nc").is_err());
        assert_eq!(parse_checkpoint("runs/unet.ckpt").unwrap().0, "unet");
    }

    #[test]
    fn validation_errors_exit_with_two() {
        assert_eq!(CliError::from(gridsr::Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(gridsr::Error::Divergence { epoch: 3 }).exit_code(), 1);
        assert_eq!(CliError::Runtime("x".into()).exit_code(), 1);
    }
}
