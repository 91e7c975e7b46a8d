//! Performance estimation.
//!
//! The search only needs a score per configuration. [`Evaluator`] is that
//! contract; [`Surrogate`] is a deterministic closed-form stand-in and
//! [`ExternalEvaluator`] talks to evaluator processes over line-delimited JSON.
//! [`spearman_rho`] and [`calibrate`] measure how well one scoring ranks
//! architectures relative to another.

mod external;
mod spearman;
mod surrogate;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchConfig, ArchError, NetworkTemplate};
use crate::cost::{total_macs, CostError};

pub use external::{
    ExternalClient, ExternalEvaluator, WireRequest, WireResponse, WireStage, PROTOCOL_VERSION,
};
pub use spearman::{average_ranks, spearman_rho, Correlation, RankError};
pub use surrogate::{config_noise, Surrogate, SurrogateParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluator did not respond within {0:?}")]
    Timeout(Duration),
    #[error("malformed evaluator response: {0}")]
    MalformedResponse(String),
    #[error("evaluator exited without responding ({status})")]
    NonZeroExit { status: String },
    #[error("accuracy {0} outside [0, 1]")]
    AccuracyOutOfRange(f64),
    #[error("evaluator speaks protocol {found}, expected {expected}")]
    ProtocolMismatch { expected: u32, found: u64 },
    #[error("evaluator reported an error: {0}")]
    Remote(String),
    #[error("cannot launch evaluator `{command}`: {message}")]
    Spawn { command: String, message: String },
    #[error("invalid evaluator: {0}")]
    Invalid(String),
    #[error("evaluator i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cost(#[from] CostError),
}

impl EvalError {
    /// Stable identifier used in trace failure records.
    pub fn kind(&self) -> &'static str {
        match self {
            EvalError::Timeout(_) => "timeout",
            EvalError::MalformedResponse(_) => "malformed_response",
            EvalError::NonZeroExit { .. } => "non_zero_exit",
            EvalError::AccuracyOutOfRange(_) => "accuracy_out_of_range",
            EvalError::ProtocolMismatch { .. } => "protocol_mismatch",
            EvalError::Remote(_) => "remote_error",
            EvalError::Spawn { .. } => "spawn",
            EvalError::Invalid(_) => "invalid",
            EvalError::Io(_) => "io",
            EvalError::Cost(_) => "cost",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub accuracy: f64,
    pub meta: BTreeMap<String, serde_json::Value>,
    #[serde(skip)]
    pub duration: Duration,
}

impl EvaluationResult {
    pub fn new(accuracy: f64) -> Result<Self, EvalError> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(EvalError::AccuracyOutOfRange(accuracy));
        }
        Ok(EvaluationResult {
            accuracy,
            meta: BTreeMap::new(),
            duration: Duration::ZERO,
        })
    }
}

/// Scores a configuration. Implementations must be safe to call concurrently.
pub trait Evaluator: Send + Sync {
    /// `budget_macs` is the step budget the candidate was generated for.
    fn evaluate(
        &self,
        template: &NetworkTemplate,
        config: &ArchConfig,
        budget_macs: u64,
    ) -> Result<EvaluationResult, EvalError>;
}

/// Serializable choice of evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorRef {
    Surrogate { params: SurrogateParams },
    External { command: String, timeout_secs: f64 },
}

impl EvaluatorRef {
    pub fn validate(&self) -> Result<(), EvalError> {
        match self {
            EvaluatorRef::Surrogate { params } => params.validate(),
            EvaluatorRef::External {
                command,
                timeout_secs,
            } => {
                if !(*timeout_secs > 0.0 && timeout_secs.is_finite()) {
                    return Err(EvalError::Invalid("timeout must be positive".into()));
                }
                match shlex::split(command) {
                    Some(argv) if !argv.is_empty() => Ok(()),
                    _ => Err(EvalError::Invalid(format!(
                        "cannot parse command `{command}`"
                    ))),
                }
            }
        }
    }

    pub fn build(&self) -> Result<Box<dyn Evaluator>, EvalError> {
        self.validate()?;
        Ok(match self {
            EvaluatorRef::Surrogate { params } => Box::new(Surrogate::new(params.clone())?),
            EvaluatorRef::External {
                command,
                timeout_secs,
            } => Box::new(ExternalEvaluator::new(
                command,
                Duration::from_secs_f64(*timeout_secs),
            )?),
        })
    }
}

/// One architecture with a trusted accuracy, e.g. from full training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferencePoint {
    pub config: ArchConfig,
    pub accuracy: f64,
}

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("calibration needs at least 2 reference points, got {0}")]
    TooFew(usize),
    #[error("reference point {index}: {source}")]
    Config {
        index: usize,
        #[source]
        source: ArchError,
    },
    #[error("reference point {index}: {source}")]
    Eval {
        index: usize,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Rank(#[from] RankError),
}

/// Spearman correlation between reference accuracies and `evaluator`'s scores.
pub fn calibrate(
    template: &NetworkTemplate,
    reference: &[ReferencePoint],
    evaluator: &dyn Evaluator,
) -> Result<Correlation, CalibrateError> {
    if reference.len() < 2 {
        return Err(CalibrateError::TooFew(reference.len()));
    }
    let mut estimated = Vec::with_capacity(reference.len());
    for (index, point) in reference.iter().enumerate() {
        template
            .check(&point.config)
            .map_err(|source| CalibrateError::Config { index, source })?;
        let budget = total_macs(template, &point.config).map_err(|e| CalibrateError::Eval {
            index,
            source: e.into(),
        })?;
        let result = evaluator
            .evaluate(template, &point.config, budget)
            .map_err(|source| CalibrateError::Eval { index, source })?;
        estimated.push(result.accuracy);
    }
    let truth: Vec<f64> = reference.iter().map(|p| p.accuracy).collect();
    Ok(spearman_rho(&truth, &estimated)?)
}
