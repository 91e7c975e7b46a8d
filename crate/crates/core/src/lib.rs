//! Greedy network enlarging.
//!
//! Given a base network template and a target MACs budget, [`search::run_search`]
//! grows the base configuration in a sequence of budget steps. Each step
//! enumerates resolution, depth and width growths whose MACs land within a
//! tolerance of the step budget, scores them with an [`estimator::Evaluator`]
//! and keeps the best.

pub mod arch;
pub mod candidates;
pub mod cost;
pub mod estimator;
pub mod ratio;
pub mod search;
pub mod templates;
pub mod trace;

pub use arch::{ArchConfig, ArchError, BlockKind, NetworkTemplate};
pub use candidates::{Candidate, CandidateError, GrowthParams, Provenance};
pub use cost::{network_macs, params_count, total_macs, CostError, MacsBreakdown};
pub use estimator::{
    spearman_rho, Correlation, EvalError, EvaluationResult, Evaluator, EvaluatorRef, Surrogate,
    SurrogateParams,
};
pub use ratio::Ratio;
pub use search::{
    budget_schedule, resume_search, run_search, SearchError, SearchOutcome, SearchSpec,
};
pub use trace::{TraceLog, TraceRecord, TraceWriter};
