use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use clap::Args;
use serde::Serialize;
use stagegrow::candidates::GrowthParams;
use stagegrow::search::{resume_search, SearchOutcome, SelectedConfig};
use stagegrow::trace::TraceLog;
use stagegrow::{ArchConfig, EvaluatorRef, NetworkTemplate, Ratio, SearchSpec, SurrogateParams};

use crate::Usage;

const DEFAULT_EVAL_TIMEOUT: f64 = 600.0;

/// Flags that define the search; with `--resume` they come from the trace instead.
const SPEC_FLAGS: [&str; 14] = [
    "target_macs",
    "iterations",
    "delta",
    "sr",
    "sd",
    "sw",
    "ratios",
    "evaluator",
    "surrogate_params",
    "surrogate_noise",
    "eval_timeout",
    "seed",
    "frontier_only",
    "relax_on_empty",
];

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Template file or built-in name (efficientnet-b0, ghostnet).
    #[arg(long)]
    template: String,
    /// Final MACs budget T.
    #[arg(long, required_unless_present = "resume")]
    target_macs: Option<u64>,
    /// Number of enlarging steps N.
    #[arg(long, required_unless_present = "resume")]
    iterations: Option<u32>,
    /// Budget tolerance as a fraction of T (`0.01` or `1/100`).
    #[arg(long)]
    delta: Option<Ratio>,
    /// Resolution step in pixels.
    #[arg(long)]
    sr: Option<u32>,
    /// Depth step in blocks.
    #[arg(long)]
    sd: Option<u32>,
    /// Width step in channels.
    #[arg(long)]
    sw: Option<u32>,
    /// Comma-separated depth/width split ratios, e.g. `0,0.5,1`.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<Ratio>>,
    /// `surrogate` (default) or `exec:<command>`.
    #[arg(long)]
    evaluator: Option<String>,
    /// JSON file with surrogate parameters (default: derived from the template).
    #[arg(long)]
    surrogate_params: Option<PathBuf>,
    /// Amplitude of the surrogate's deterministic per-config noise.
    #[arg(long)]
    surrogate_noise: Option<f64>,
    /// Per-request timeout for external evaluators, in seconds [default: 600].
    #[arg(long)]
    eval_timeout: Option<f64>,
    /// Seed for the surrogate's per-config noise [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent evaluations.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Continue the search recorded in this trace.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Grow only from the latest selection.
    #[arg(long)]
    frontier_only: bool,
    /// Admit the nearest miss when an iteration has no admissible candidate.
    #[arg(long)]
    relax_on_empty: bool,
    /// Output directory for trace.jsonl, final_config.json and manifest.json.
    #[arg(long, required_unless_present = "resume")]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool_version: &'static str,
    template: &'a str,
    template_digest: String,
    base_macs: u64,
    spec: &'a SearchSpec,
    workers: usize,
    resumed_from_iteration: Option<u32>,
    started_at: String,
    finished_at: String,
    trace: &'a Path,
    final_config: PathBuf,
    best: Best<'a>,
}

#[derive(Serialize)]
struct Best<'a> {
    config: &'a ArchConfig,
    macs: u64,
    accuracy: Option<f64>,
    iteration: usize,
}

fn build_spec(args: &SearchArgs, template: &NetworkTemplate) -> Result<SearchSpec> {
    let defaults = GrowthParams::default();
    let growth = GrowthParams::new(
        args.sr.unwrap_or(defaults.resolution_step),
        args.sd.unwrap_or(defaults.depth_step),
        args.sw.unwrap_or(defaults.width_step),
        args.ratios.clone().unwrap_or(defaults.ratios),
        args.delta.unwrap_or(defaults.delta),
    )?;
    let seed = args.seed.unwrap_or(0);
    let choice = args.evaluator.as_deref().unwrap_or("surrogate");
    let evaluator = if choice == "surrogate" {
        let mut params = match &args.surrogate_params {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str::<SurrogateParams>(&text)
                    .map_err(|e| Usage(format!("{}: {e}", path.display())))?
            }
            None => SurrogateParams::for_template(template),
        };
        if let Some(noise) = args.surrogate_noise {
            params.noise = noise;
        }
        params.seed = seed;
        EvaluatorRef::Surrogate { params }
    } else if let Some(command) = choice.strip_prefix("exec:") {
        if args.surrogate_params.is_some() || args.surrogate_noise.is_some() {
            return Err(Usage("surrogate options need --evaluator surrogate".into()).into());
        }
        EvaluatorRef::External {
            command: command.to_string(),
            timeout_secs: args.eval_timeout.unwrap_or(DEFAULT_EVAL_TIMEOUT),
        }
    } else {
        return Err(Usage(format!(
            "unknown evaluator `{choice}`; use surrogate or exec:<command>"
        ))
        .into());
    };
    let spec = SearchSpec {
        target_macs: args.target_macs.expect("required by clap"),
        iterations: args.iterations.expect("required by clap"),
        growth,
        evaluator,
        seed,
        frontier_only: args.frontier_only,
        relax_on_empty: args.relax_on_empty,
    };
    spec.evaluator.validate()?;
    Ok(spec)
}

fn explicit_spec_flags(matches: &[&str]) -> Vec<String> {
    matches
        .iter()
        .map(|f| format!("--{}", f.replace('_', "-")))
        .collect()
}

pub fn run(args: SearchArgs) -> Result<()> {
    let (template, template_name) = crate::load_template(&args.template)?;
    if args.workers == 0 {
        return Err(Usage("--workers must be at least 1".into()).into());
    }
    let started_at = Utc::now();

    let (spec, trace_path, out_dir, resumed_from) = match &args.resume {
        Some(trace) => {
            let given = given_spec_flags(&args);
            if !given.is_empty() {
                return Err(Usage(format!(
                    "{} cannot be combined with --resume; the search is defined by the trace",
                    explicit_spec_flags(&given).join(", ")
                ))
                .into());
            }
            let log = TraceLog::read(trace)?;
            let spec = log.header.spec.clone();
            let done = log.iterations().count() as u32;
            let out = match &args.out {
                Some(dir) => dir.clone(),
                None => trace
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            (spec, trace.clone(), out, Some(done))
        }
        None => {
            let spec = build_spec(&args, &template)?;
            let out = args.out.clone().expect("required by clap");
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let trace = out.join("trace.jsonl");
            // A fresh run never appends to an old trace.
            if trace.exists() {
                std::fs::remove_file(&trace)
                    .with_context(|| format!("removing {}", trace.display()))?;
            }
            (spec, trace, out, None)
        }
    };
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let evaluator = spec.evaluator.build()?;
    let outcome = resume_search(
        &template,
        &spec,
        evaluator.as_ref(),
        &trace_path,
        args.workers,
    )?;
    report_progress(&outcome);

    let final_config = out_dir.join("final_config.json");
    crate::write_json(&final_config, &outcome.best.config)?;
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        template: &template_name,
        template_digest: template.digest(),
        base_macs: outcome.state.selected[0].macs,
        spec: &spec,
        workers: args.workers,
        resumed_from_iteration: resumed_from,
        started_at: started_at.to_rfc3339_opts(SecondsFormat::Millis, true),
        finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        trace: &trace_path,
        final_config,
        best: best(&outcome),
    };
    crate::write_json(&out_dir.join("manifest.json"), &manifest)?;
    println!("{}", serde_json::to_string(&manifest.best)?);
    Ok(())
}

fn given_spec_flags(args: &SearchArgs) -> Vec<&'static str> {
    let given = [
        args.target_macs.is_some(),
        args.iterations.is_some(),
        args.delta.is_some(),
        args.sr.is_some(),
        args.sd.is_some(),
        args.sw.is_some(),
        args.ratios.is_some(),
        args.evaluator.is_some(),
        args.surrogate_params.is_some(),
        args.surrogate_noise.is_some(),
        args.eval_timeout.is_some(),
        args.seed.is_some(),
        args.frontier_only,
        args.relax_on_empty,
    ];
    SPEC_FLAGS
        .iter()
        .zip(given)
        .filter(|(_, g)| *g)
        .map(|(f, _)| *f)
        .collect()
}

fn best(outcome: &SearchOutcome) -> Best<'_> {
    let SelectedConfig {
        config,
        macs,
        accuracy,
        ..
    } = &outcome.best;
    Best {
        config,
        macs: *macs,
        accuracy: *accuracy,
        iteration: outcome.state.selected.len() - 1,
    }
}

fn report_progress(outcome: &SearchOutcome) {
    for rec in &outcome.records {
        let best = rec.best();
        eprintln!(
            "iteration {:>3}  T_i {:>14}  candidates {:>4}  macs {:>14}  acc {:.6}  {}{}{}",
            rec.iteration,
            rec.step_target,
            rec.candidates.len(),
            best.candidate.macs,
            best.result.accuracy,
            best.candidate.config,
            if rec.relaxed { "  (relaxed)" } else { "" },
            if rec.wall_time > Duration::ZERO {
                format!("  {:.2}s", rec.wall_time.as_secs_f64())
            } else {
                String::new()
            }
        );
    }
}
