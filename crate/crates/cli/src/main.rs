//! `stagegrow`: MACs accounting, greedy enlarging search, trace reports and
//! evaluator calibration.

mod calibrate;
mod macs;
mod report;
mod search;
mod worker;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use stagegrow::estimator::{CalibrateError, EvalError};
use stagegrow::ratio::RatioError;
use stagegrow::trace::TraceError;
use stagegrow::{templates, ArchConfig, ArchError, CandidateError, NetworkTemplate, SearchError};

/// Success.
pub const EXIT_OK: u8 = 0;
/// I/O or any other runtime failure.
pub const EXIT_FAILURE: u8 = 1;
/// Invalid input: arguments, templates, configs, traces that do not match.
pub const EXIT_INVALID: u8 = 2;
/// The evaluator failed or misbehaved.
pub const EXIT_EVALUATOR: u8 = 3;
/// An iteration had no admissible candidate.
pub const EXIT_EMPTY: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "stagegrow",
    version,
    about = "Greedy network enlarging under a MACs budget"
)]
struct Cli {
    /// Log filter, e.g. `info` or `stagegrow=debug` (overrides RUST_LOG).
    #[arg(long, global = true)]
    log: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the MACs and parameter breakdown of a configuration.
    Macs(macs::MacsArgs),
    /// Run (or resume) a greedy search.
    Search(Box<search::SearchArgs>),
    /// Summarize a search trace as CSV.
    Report(report::ReportArgs),
    /// Spearman correlation between reference accuracies and an evaluator.
    Calibrate(calibrate::CalibrateArgs),
    /// Reference evaluator process speaking the wire protocol on stdin/stdout.
    Worker(worker::WorkerArgs),
}

/// A usage error detected after argument parsing.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Loads a template from a file, or one of the built-in names.
pub fn load_template(spec: &str) -> Result<(NetworkTemplate, String)> {
    let path = Path::new(spec);
    if path.exists() {
        let template = NetworkTemplate::load(path)?;
        return Ok((template, path.display().to_string()));
    }
    let name = spec.strip_prefix("builtin:").unwrap_or(spec);
    match templates::builtin(name) {
        Some(t) => Ok((t?, format!("builtin:{name}"))),
        None => Err(Usage(format!(
            "template `{spec}` is neither a file nor a built-in ({})",
            templates::NAMES.join(", ")
        ))
        .into()),
    }
}

pub fn load_config(template: &NetworkTemplate, path: Option<&PathBuf>) -> Result<ArchConfig> {
    match path {
        Some(p) => Ok(ArchConfig::load(template, p)?),
        None => Ok(template.base_config()),
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SearchError>() {
            return match e {
                SearchError::EmptyCandidateSet { .. } => EXIT_EMPTY,
                SearchError::EvaluatorFailure { .. } | SearchError::Evaluator(_) => EXIT_EVALUATOR,
                SearchError::Trace(TraceError::Io { .. }) => EXIT_FAILURE,
                _ => EXIT_INVALID,
            };
        }
        if let Some(e) = cause.downcast_ref::<CalibrateError>() {
            return match e {
                CalibrateError::Eval { .. } => EXIT_EVALUATOR,
                _ => EXIT_INVALID,
            };
        }
        if cause.is::<EvalError>() {
            return EXIT_EVALUATOR;
        }
        if let Some(e) = cause.downcast_ref::<ArchError>() {
            return match e {
                ArchError::Io { .. } => EXIT_FAILURE,
                _ => EXIT_INVALID,
            };
        }
        if let Some(e) = cause.downcast_ref::<TraceError>() {
            return match e {
                TraceError::Io { .. } => EXIT_FAILURE,
                _ => EXIT_INVALID,
            };
        }
        if cause.is::<Usage>() || cause.is::<RatioError>() || cause.is::<CandidateError>() {
            return EXIT_INVALID;
        }
    }
    EXIT_FAILURE
}

fn init_logging(filter: Option<&str>) {
    use tracing_subscriber::EnvFilter;
    let filter = match filter {
        Some(f) => EnvFilter::new(f),
        None => EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log.as_deref());
    let result = match cli.command {
        Command::Macs(args) => macs::run(args),
        Command::Search(args) => search::run(*args),
        Command::Report(args) => report::run(args),
        Command::Calibrate(args) => calibrate::run(args),
        Command::Worker(args) => worker::run(args),
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
