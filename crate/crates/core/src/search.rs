//! The greedy enlarging loop.
//!
//! Starting from the base configuration `S = [base]`, iteration `i` of `N`
//! raises the budget to `T_i = round(B0 * (T / B0)^(i / N))`, generates
//! candidates from the elements of `S`, scores them and appends the best one
//! to `S`. The last selection is the result.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::arch::{ArchConfig, NetworkTemplate};
use crate::candidates::{
    collect_candidates, Candidate, CandidateError, GrowthParams, ParentRef, Provenance, StepBudget,
};
use crate::cost::{total_macs, CostError};
use crate::estimator::{EvalError, EvaluationResult, Evaluator, EvaluatorRef};
use crate::trace::{
    EvaluationRecord, FailureRecord, IterationSummary, TraceError, TraceHeader, TraceLog,
    TraceRecord, TraceSink, TraceWriter, SCHEMA_VERSION,
};

/// How many near misses an empty-iteration diagnostic lists.
const NEAREST_MISSES: usize = 5;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search: {0}")]
    InvalidSpec(String),
    #[error("schedule needs 0 < B0 < T and 0 <= i <= N (B0={base}, T={target}, N={iterations}, i={index})")]
    Schedule {
        base: u64,
        target: u64,
        iterations: u32,
        index: u32,
    },
    #[error(
        "iteration {iteration}: no candidate within tolerance of step budget {step_target}; nearest misses (MACs): {nearest_misses:?}"
    )]
    EmptyCandidateSet {
        iteration: u32,
        step_target: u64,
        nearest_misses: Vec<u64>,
    },
    #[error("iteration {iteration}: evaluating candidate {index} failed: {source}")]
    EvaluatorFailure {
        iteration: u32,
        index: usize,
        #[source]
        source: EvalError,
    },
    #[error("cannot select from an empty candidate list")]
    NothingToSelect,
    #[error(transparent)]
    Evaluator(#[from] EvalError),
    #[error(transparent)]
    Candidate(#[from] CandidateError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Everything that determines a search's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    pub target_macs: u64,
    pub iterations: u32,
    pub growth: GrowthParams,
    pub evaluator: EvaluatorRef,
    pub seed: u64,
    /// Grow only from the latest selection instead of every element of `S`.
    #[serde(default)]
    pub frontier_only: bool,
    /// Admit the nearest miss when no candidate meets the tolerance.
    #[serde(default)]
    pub relax_on_empty: bool,
}

/// `round(base * (target / base)^(i / iterations))`, pinned to `target` at `i = iterations`.
pub fn budget_schedule(
    base: u64,
    target: u64,
    iterations: u32,
    index: u32,
) -> Result<u64, SearchError> {
    if base == 0 || target <= base || iterations == 0 || index > iterations {
        return Err(SearchError::Schedule {
            base,
            target,
            iterations,
            index,
        });
    }
    if index == iterations {
        return Ok(target);
    }
    if index == 0 {
        return Ok(base);
    }
    let growth = (target as f64 / base as f64).ln() * (index as f64 / iterations as f64);
    Ok((base as f64 * growth.exp()).round() as u64)
}

/// Index of the highest accuracy; ties go to lower MACs, then to the earlier candidate.
pub fn select_best(
    candidates: &[Candidate],
    results: &[EvaluationResult],
) -> Result<usize, SearchError> {
    if candidates.is_empty() || candidates.len() != results.len() {
        return Err(SearchError::NothingToSelect);
    }
    let mut best = 0;
    for i in 1..candidates.len() {
        let (a, b) = (results[i].accuracy, results[best].accuracy);
        if a > b || (a == b && candidates[i].macs < candidates[best].macs) {
            best = i;
        }
    }
    Ok(best)
}

/// One element of `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedConfig {
    pub config: ArchConfig,
    pub macs: u64,
    /// `None` for the unevaluated base network.
    pub accuracy: Option<f64>,
    pub parent: Option<usize>,
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub selected: Vec<SelectedConfig>,
    /// Completed iterations.
    pub iteration: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedCandidate {
    pub candidate: Candidate,
    pub result: EvaluationResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: u32,
    pub step_target: u64,
    pub candidates: Vec<EvaluatedCandidate>,
    pub selected: usize,
    pub relaxed: bool,
    pub wall_time: Duration,
}

impl IterationRecord {
    pub fn best(&self) -> &EvaluatedCandidate {
        &self.candidates[self.selected]
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: SelectedConfig,
    pub records: Vec<IterationRecord>,
    pub state: SearchState,
}

/// A search in progress.
pub struct Search<'a> {
    template: &'a NetworkTemplate,
    spec: &'a SearchSpec,
    base_macs: u64,
    state: SearchState,
    records: Vec<IterationRecord>,
    workers: usize,
}

impl<'a> Search<'a> {
    pub fn new(template: &'a NetworkTemplate, spec: &'a SearchSpec) -> Result<Self, SearchError> {
        template
            .validate()
            .map_err(|e| SearchError::InvalidSpec(e.to_string()))?;
        spec.growth.validate()?;
        spec.evaluator.validate()?;
        if spec.iterations == 0 {
            return Err(SearchError::InvalidSpec("iterations must be >= 1".into()));
        }
        let base = template.base_config();
        let base_macs = total_macs(template, &base)?;
        if spec.target_macs <= base_macs {
            return Err(SearchError::InvalidSpec(format!(
                "target {} must exceed base MACs {}",
                spec.target_macs, base_macs
            )));
        }
        Ok(Search {
            template,
            spec,
            base_macs,
            state: SearchState {
                selected: vec![SelectedConfig {
                    config: base,
                    macs: base_macs,
                    accuracy: None,
                    parent: None,
                    provenance: None,
                }],
                iteration: 0,
                seed: spec.seed,
            },
            records: Vec::new(),
            workers: 1,
        })
    }

    /// Concurrent evaluations per iteration.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn base_macs(&self) -> u64 {
        self.base_macs
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn is_complete(&self) -> bool {
        self.state.iteration >= self.spec.iterations
    }

    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            schema_version: SCHEMA_VERSION,
            template_digest: self.template.digest(),
            base_macs: self.base_macs,
            spec: self.spec.clone(),
        }
    }

    pub fn step_target(&self, iteration: u32) -> Result<u64, SearchError> {
        budget_schedule(
            self.base_macs,
            self.spec.target_macs,
            self.spec.iterations,
            iteration,
        )
    }

    /// Rebuilds state from the durable prefix of a trace written by the same search.
    pub fn restore(&mut self, log: &TraceLog) -> Result<(), SearchError> {
        let expected = self.header();
        if log.header != expected {
            let what = if log.header.template_digest != expected.template_digest {
                "template differs"
            } else if log.header.spec != expected.spec {
                "search parameters differ"
            } else {
                "base network differs"
            };
            return Err(TraceError::HeaderMismatch(what.into()).into());
        }
        if self.state.iteration != 0 {
            return Err(SearchError::InvalidSpec(
                "restore needs a fresh search".into(),
            ));
        }
        let inconsistent = |m: String| SearchError::Trace(TraceError::Inconsistent(m));
        let mut pending: Vec<EvaluatedCandidate> = Vec::new();
        for record in &log.records[1..log.durable_records] {
            match record {
                TraceRecord::Evaluation(e) => {
                    if e.iteration != self.state.iteration + 1 || e.index != pending.len() {
                        return Err(inconsistent(format!(
                            "unexpected evaluation {}/{}",
                            e.iteration, e.index
                        )));
                    }
                    pending.push(EvaluatedCandidate {
                        candidate: Candidate {
                            config: e.config.clone(),
                            macs: e.macs,
                            provenance: e.provenance,
                            parent: e.parent,
                        },
                        result: EvaluationResult {
                            accuracy: e.accuracy,
                            meta: e.meta.clone(),
                            duration: Duration::ZERO,
                        },
                    });
                }
                TraceRecord::Iteration(s) => {
                    let i = self.state.iteration + 1;
                    if s.iteration != i {
                        return Err(inconsistent(format!(
                            "iteration {} follows {}",
                            s.iteration,
                            i - 1
                        )));
                    }
                    if s.step_target != self.step_target(i)? {
                        return Err(inconsistent(format!(
                            "iteration {i} has a different step budget"
                        )));
                    }
                    self.template
                        .check(&s.config)
                        .map_err(|e| inconsistent(format!("iteration {i}: {e}")))?;
                    if total_macs(self.template, &s.config)? != s.macs {
                        return Err(inconsistent(format!(
                            "iteration {i}: recorded MACs disagree"
                        )));
                    }
                    if s.parent >= self.state.selected.len() || s.selected >= pending.len().max(1) {
                        return Err(inconsistent(format!("iteration {i}: dangling index")));
                    }
                    self.state.selected.push(SelectedConfig {
                        config: s.config.clone(),
                        macs: s.macs,
                        accuracy: Some(s.accuracy),
                        parent: Some(s.parent),
                        provenance: Some(s.provenance),
                    });
                    self.state.iteration = i;
                    self.records.push(IterationRecord {
                        iteration: i,
                        step_target: s.step_target,
                        candidates: std::mem::take(&mut pending),
                        selected: s.selected,
                        relaxed: s.relaxed,
                        wall_time: Duration::ZERO,
                    });
                }
                TraceRecord::Failure(_) => {}
                TraceRecord::Header(_) => return Err(inconsistent("second header".into())),
            }
        }
        Ok(())
    }

    /// Runs one iteration and records it.
    pub fn step(
        &mut self,
        evaluator: &dyn Evaluator,
        sink: &mut dyn TraceSink,
    ) -> Result<&IterationRecord, SearchError> {
        let started = Instant::now();
        let iteration = self.state.iteration + 1;
        let step_target = self.step_target(iteration)?;
        let budget = StepBudget {
            step_target,
            target: self.spec.target_macs,
            delta: self.spec.growth.delta,
        };

        let all: Vec<ParentRef<'_>> = self
            .state
            .selected
            .iter()
            .enumerate()
            .map(|(index, s)| ParentRef {
                index,
                config: &s.config,
                macs: s.macs,
            })
            .collect();
        let parents = if self.spec.frontier_only {
            &all[all.len() - 1..]
        } else {
            &all[..]
        };
        let set = collect_candidates(self.template, parents, budget, &self.spec.growth)?;

        let mut relaxed = false;
        let candidates = if !set.accepted.is_empty() {
            set.accepted
        } else {
            let misses = set.nearest_misses(step_target);
            match misses.first() {
                Some(nearest) if self.spec.relax_on_empty => {
                    relaxed = true;
                    vec![(*nearest).clone()]
                }
                _ => {
                    let nearest_misses: Vec<u64> =
                        misses.iter().take(NEAREST_MISSES).map(|c| c.macs).collect();
                    let err = SearchError::EmptyCandidateSet {
                        iteration,
                        step_target,
                        nearest_misses: nearest_misses.clone(),
                    };
                    sink.record(&TraceRecord::Failure(FailureRecord {
                        iteration,
                        kind: "empty_candidate_set".into(),
                        message: err.to_string(),
                        index: None,
                        nearest_misses,
                    }))?;
                    sink.commit()?;
                    return Err(err);
                }
            }
        };
        debug!(
            iteration,
            step_target,
            count = candidates.len(),
            relaxed,
            "evaluating candidates"
        );

        let outcomes = evaluate_all(
            self.template,
            evaluator,
            &candidates,
            step_target,
            self.workers,
        );
        let mut results = Vec::with_capacity(outcomes.len());
        for (index, (candidate, outcome)) in candidates.iter().zip(outcomes).enumerate() {
            match outcome {
                Ok(result) => {
                    sink.record(&TraceRecord::Evaluation(EvaluationRecord {
                        iteration,
                        index,
                        parent: candidate.parent,
                        provenance: candidate.provenance,
                        config: candidate.config.clone(),
                        macs: candidate.macs,
                        accuracy: result.accuracy,
                        meta: result.meta.clone(),
                    }))?;
                    results.push(result);
                }
                Err(source) => {
                    sink.record(&TraceRecord::Failure(FailureRecord {
                        iteration,
                        kind: source.kind().into(),
                        message: source.to_string(),
                        index: Some(index),
                        nearest_misses: Vec::new(),
                    }))?;
                    sink.commit()?;
                    return Err(SearchError::EvaluatorFailure {
                        iteration,
                        index,
                        source,
                    });
                }
            }
        }

        let selected = select_best(&candidates, &results)?;
        let winner = &candidates[selected];
        sink.record(&TraceRecord::Iteration(IterationSummary {
            iteration,
            step_target,
            candidate_count: candidates.len(),
            selected,
            parent: winner.parent,
            provenance: winner.provenance,
            config: winner.config.clone(),
            macs: winner.macs,
            accuracy: results[selected].accuracy,
            relaxed,
        }))?;
        sink.commit()?;
        info!(
            iteration,
            step_target,
            candidates = candidates.len(),
            macs = winner.macs,
            accuracy = results[selected].accuracy,
            config = %winner.config,
            "selected"
        );

        self.state.selected.push(SelectedConfig {
            config: winner.config.clone(),
            macs: winner.macs,
            accuracy: Some(results[selected].accuracy),
            parent: Some(winner.parent),
            provenance: Some(winner.provenance),
        });
        self.state.iteration = iteration;
        self.records.push(IterationRecord {
            iteration,
            step_target,
            candidates: candidates
                .into_iter()
                .zip(results)
                .map(|(candidate, result)| EvaluatedCandidate { candidate, result })
                .collect(),
            selected,
            relaxed,
            wall_time: started.elapsed(),
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Runs the remaining iterations.
    pub fn run(
        mut self,
        evaluator: &dyn Evaluator,
        sink: &mut dyn TraceSink,
    ) -> Result<SearchOutcome, SearchError> {
        while !self.is_complete() {
            self.step(evaluator, sink)?;
        }
        Ok(self.finish())
    }

    fn finish(self) -> SearchOutcome {
        SearchOutcome {
            best: self
                .state
                .selected
                .last()
                .expect("S is never empty")
                .clone(),
            records: self.records,
            state: self.state,
        }
    }
}

fn evaluate_all(
    template: &NetworkTemplate,
    evaluator: &dyn Evaluator,
    candidates: &[Candidate],
    step_target: u64,
    workers: usize,
) -> Vec<Result<EvaluationResult, EvalError>> {
    let eval = |c: &Candidate| evaluator.evaluate(template, &c.config, step_target);
    if workers <= 1 || candidates.len() <= 1 {
        let mut out = Vec::with_capacity(candidates.len());
        for c in candidates {
            let r = eval(c);
            let failed = r.is_err();
            out.push(r);
            if failed {
                break;
            }
        }
        return out;
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<EvaluationResult, EvalError>>>> =
        candidates.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(candidates.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= candidates.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(eval(&candidates[i]));
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

/// Runs a full search, writing the header and every iteration to `sink`.
pub fn run_search(
    template: &NetworkTemplate,
    spec: &SearchSpec,
    evaluator: &dyn Evaluator,
    sink: &mut dyn TraceSink,
    workers: usize,
) -> Result<SearchOutcome, SearchError> {
    let search = Search::new(template, spec)?.with_workers(workers);
    sink.record(&TraceRecord::Header(search.header()))?;
    sink.commit()?;
    search.run(evaluator, sink)
}

/// Continues the search recorded in the trace at `path`, or starts it when
/// the file is missing or holds no complete header.
pub fn resume_search(
    template: &NetworkTemplate,
    spec: &SearchSpec,
    evaluator: &dyn Evaluator,
    path: &Path,
    workers: usize,
) -> Result<SearchOutcome, SearchError> {
    let log = match TraceLog::read(path) {
        Ok(log) => Some(log),
        Err(TraceError::MissingHeader) => None,
        Err(TraceError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let Some(log) = log else {
        let mut writer = TraceWriter::create(path)?;
        return run_search(template, spec, evaluator, &mut writer, workers);
    };
    let mut search = Search::new(template, spec)?.with_workers(workers);
    search.restore(&log)?;
    info!(completed = search.state().iteration, "resuming search");
    let mut writer = TraceWriter::append_at(path, log.durable_len)?;
    search.run(evaluator, &mut writer)
}
