use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use stagegrow::estimator::{calibrate, ExternalEvaluator, ReferencePoint};
use stagegrow::{Correlation, Evaluator, Surrogate, SurrogateParams};

use crate::Usage;

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Template file or built-in name.
    #[arg(long)]
    template: String,
    /// JSON list of `{"config": {...}, "accuracy": 0.77}` reference points.
    #[arg(long)]
    reference: PathBuf,
    /// `surrogate` or `exec:<command>`.
    #[arg(long, default_value = "surrogate")]
    evaluator: String,
    /// JSON file with surrogate parameters (default: derived from the template).
    #[arg(long)]
    surrogate_params: Option<PathBuf>,
    /// Per-request timeout for external evaluators, in seconds.
    #[arg(long, default_value_t = 600.0)]
    eval_timeout: f64,
}

#[derive(Serialize)]
struct Calibration {
    points: usize,
    spearman: Correlation,
}

pub fn run(args: CalibrateArgs) -> Result<()> {
    let (template, _) = crate::load_template(&args.template)?;
    let text = std::fs::read_to_string(&args.reference)
        .with_context(|| format!("reading {}", args.reference.display()))?;
    let reference: Vec<ReferencePoint> = serde_json::from_str(&text)
        .map_err(|e| Usage(format!("{}: {e}", args.reference.display())))?;

    let evaluator: Box<dyn Evaluator> = if args.evaluator == "surrogate" {
        let params = match &args.surrogate_params {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| Usage(format!("{}: {e}", path.display())))?
            }
            None => SurrogateParams::for_template(&template),
        };
        Box::new(Surrogate::new(params)?)
    } else if let Some(command) = args.evaluator.strip_prefix("exec:") {
        if !(args.eval_timeout > 0.0 && args.eval_timeout.is_finite()) {
            return Err(Usage("--eval-timeout must be positive".into()).into());
        }
        Box::new(ExternalEvaluator::new(
            command,
            Duration::from_secs_f64(args.eval_timeout),
        )?)
    } else {
        return Err(Usage(format!("unknown evaluator `{}`", args.evaluator)).into());
    };

    let spearman = calibrate(&template, &reference, evaluator.as_ref())?;
    println!(
        "{}",
        serde_json::to_string(&Calibration {
            points: reference.len(),
            spearman,
        })?
    );
    Ok(())
}
