//! Candidate generation for one budget step.
//!
//! Two growth branches run from every parent configuration:
//!
//! * **resolution**: add `resolution_step` pixels while the network stays
//!   below the step budget `T_i`;
//! * **stage growth** (proportional collection): for stage `j` and every ratio
//!   `p`, first add `depth_step` blocks while MACs `<= p * T_i`, then add
//!   `width_step` channels while MACs `<= T_i`.
//!
//! A run's final configuration becomes a candidate only when
//! `|MACs - T_i| <= delta * T`, where `T` is the final target of the search.
//! Both branches start from the parent's stored configuration, and growth never
//! steps past a template bound; a run that stops at a bound still goes through
//! the acceptance check.
//!
//! Candidate order is deterministic: parent order, then branch (resolution
//! before stage growth), then stage index, then ratio ascending. Duplicate
//! configurations keep their first occurrence.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchConfig, ArchError, NetworkTemplate};
use crate::cost::{total_macs, CostError};
use crate::ratio::Ratio;

#[derive(Debug, Error)]
pub enum CandidateError {
    #[error("stage index {index} out of range for {stages} stages")]
    InvalidStage { index: usize, stages: usize },
    #[error("invalid growth parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Cost(#[from] CostError),
}

impl From<ArchError> for CandidateError {
    fn from(e: ArchError) -> Self {
        CandidateError::Cost(CostError::Arch(e))
    }
}

/// Step sizes, depth/width split ratios and the budget tolerance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthParams {
    pub resolution_step: u32,
    pub depth_step: u32,
    pub width_step: u32,
    pub ratios: Vec<Ratio>,
    pub delta: Ratio,
}

impl Default for GrowthParams {
    fn default() -> Self {
        GrowthParams {
            resolution_step: 8,
            depth_step: 1,
            width_step: 2,
            ratios: (0..=10).map(|k| Ratio::new(k, 10).unwrap()).collect(),
            delta: Ratio::new(1, 100).unwrap(),
        }
    }
}

impl GrowthParams {
    /// Validates and normalizes: ratios are sorted ascending and deduplicated.
    pub fn new(
        resolution_step: u32,
        depth_step: u32,
        width_step: u32,
        mut ratios: Vec<Ratio>,
        delta: Ratio,
    ) -> Result<Self, CandidateError> {
        ratios.sort();
        ratios.dedup();
        let params = GrowthParams {
            resolution_step,
            depth_step,
            width_step,
            ratios,
            delta,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), CandidateError> {
        let bad = |m: &str| Err(CandidateError::InvalidParams(m.to_string()));
        if self.resolution_step == 0 || self.depth_step == 0 || self.width_step == 0 {
            return bad("growth steps must be >= 1");
        }
        if self.ratios.is_empty() {
            return bad("ratio set must not be empty");
        }
        if self.ratios.iter().any(|p| *p > Ratio::ONE) {
            return bad("ratios must lie in [0, 1]");
        }
        if self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return bad("ratios must be strictly ascending");
        }
        if self.delta.is_zero() {
            return bad("delta must be positive");
        }
        Ok(())
    }
}

/// The admissible band around one step budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepBudget {
    pub step_target: u64,
    pub target: u64,
    pub delta: Ratio,
}

impl StepBudget {
    /// `|macs - step_target| <= delta * target`, exactly.
    pub fn admits(&self, macs: u64) -> bool {
        self.delta
            .bounds(macs.abs_diff(self.step_target), self.target)
    }
}

/// Which growth branch produced a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "branch", rename_all = "snake_case", deny_unknown_fields)]
pub enum Provenance {
    Resolution,
    Stage { stage: usize, ratio: Ratio },
}

/// Result of one growth run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Growth {
    pub config: ArchConfig,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: ArchConfig,
    pub macs: u64,
    pub provenance: Provenance,
    /// Index of the parent in the search state.
    pub parent: usize,
}

/// Runs the resolution loop without applying the acceptance check.
pub fn resolution_run(
    template: &NetworkTemplate,
    config: &ArchConfig,
    step_target: u64,
    params: &GrowthParams,
) -> Result<Growth, CandidateError> {
    let mut config = config.clone();
    let mut macs = total_macs(template, &config)?;
    while macs < step_target {
        let next = config.resolution() + params.resolution_step;
        if next > template.max_resolution {
            break;
        }
        config = config.with_resolution(template, next)?;
        macs = total_macs(template, &config)?;
    }
    Ok(Growth { config, macs })
}

pub fn grow_resolution(
    template: &NetworkTemplate,
    config: &ArchConfig,
    budget: StepBudget,
    params: &GrowthParams,
) -> Result<Option<Growth>, CandidateError> {
    let run = resolution_run(template, config, budget.step_target, params)?;
    Ok(budget.admits(run.macs).then_some(run))
}

/// Depth-then-width run for one ratio, without the acceptance check.
pub fn stage_run(
    template: &NetworkTemplate,
    config: &ArchConfig,
    stage: usize,
    ratio: Ratio,
    step_target: u64,
    params: &GrowthParams,
) -> Result<Growth, CandidateError> {
    let bounds = template
        .stages
        .get(stage)
        .ok_or(CandidateError::InvalidStage {
            index: stage,
            stages: template.num_stages(),
        })?;
    let mut config = config.clone();
    let mut width = config.widths()[stage];
    let mut depth = config.depths()[stage];
    let mut macs = total_macs(template, &config)?;

    while ratio.bounds(macs, step_target) && depth + params.depth_step <= bounds.max_depth {
        depth += params.depth_step;
        config = config.with_stage(template, stage, width, depth)?;
        macs = total_macs(template, &config)?;
    }
    while macs <= step_target && width + params.width_step <= bounds.max_width {
        width += params.width_step;
        config = config.with_stage(template, stage, width, depth)?;
        macs = total_macs(template, &config)?;
    }
    Ok(Growth { config, macs })
}

/// Every ratio's run for `stage`, in ratio order, accepted or not.
pub fn stage_runs(
    template: &NetworkTemplate,
    config: &ArchConfig,
    stage: usize,
    step_target: u64,
    params: &GrowthParams,
) -> Result<Vec<(Ratio, Growth)>, CandidateError> {
    params
        .ratios
        .iter()
        .map(|&p| {
            Ok((
                p,
                stage_run(template, config, stage, p, step_target, params)?,
            ))
        })
        .collect()
}

/// Accepted, deduplicated stage-growth results for one stage.
pub fn proportional_collection(
    template: &NetworkTemplate,
    config: &ArchConfig,
    stage: usize,
    budget: StepBudget,
    params: &GrowthParams,
) -> Result<Vec<(Ratio, Growth)>, CandidateError> {
    let mut seen = HashSet::new();
    Ok(
        stage_runs(template, config, stage, budget.step_target, params)?
            .into_iter()
            .filter(|(_, g)| budget.admits(g.macs) && seen.insert(g.config.clone()))
            .collect(),
    )
}

/// A configuration already selected into the search state.
#[derive(Debug, Clone, Copy)]
pub struct ParentRef<'a> {
    pub index: usize,
    pub config: &'a ArchConfig,
    pub macs: u64,
}

/// All run outcomes of one step, split by the acceptance check.
#[derive(Debug, Clone, Default)]
pub struct CandidateSet {
    pub accepted: Vec<Candidate>,
    pub rejected: Vec<Candidate>,
}

impl CandidateSet {
    /// Rejected runs ordered by distance to `step_target` (ties: lower MACs, then order).
    pub fn nearest_misses(&self, step_target: u64) -> Vec<&Candidate> {
        let mut misses: Vec<&Candidate> = self.rejected.iter().collect();
        misses.sort_by_key(|c| (c.macs.abs_diff(step_target), c.macs));
        misses
    }
}

pub fn collect_candidates(
    template: &NetworkTemplate,
    parents: &[ParentRef<'_>],
    budget: StepBudget,
    params: &GrowthParams,
) -> Result<CandidateSet, CandidateError> {
    params.validate()?;
    let tasks: Vec<(ParentRef<'_>, Option<usize>)> = parents
        .iter()
        .filter(|p| p.macs <= budget.step_target)
        .flat_map(|p| {
            std::iter::once((*p, None))
                .chain((0..template.num_stages()).map(move |j| (*p, Some(j))))
        })
        .collect();

    let runs: Vec<Vec<Candidate>> = tasks
        .par_iter()
        .map(
            |(parent, branch)| -> Result<Vec<Candidate>, CandidateError> {
                Ok(match *branch {
                    None => {
                        let g =
                            resolution_run(template, parent.config, budget.step_target, params)?;
                        vec![Candidate {
                            config: g.config,
                            macs: g.macs,
                            provenance: Provenance::Resolution,
                            parent: parent.index,
                        }]
                    }
                    Some(stage) => {
                        stage_runs(template, parent.config, stage, budget.step_target, params)?
                            .into_iter()
                            .map(|(ratio, g)| Candidate {
                                config: g.config,
                                macs: g.macs,
                                provenance: Provenance::Stage { stage, ratio },
                                parent: parent.index,
                            })
                            .collect()
                    }
                })
            },
        )
        .collect::<Result<_, _>>()?;

    let mut set = CandidateSet::default();
    let mut seen = HashSet::new();
    for candidate in runs.into_iter().flatten() {
        if seen.insert(candidate.config.clone()) {
            if budget.admits(candidate.macs) {
                set.accepted.push(candidate);
            } else {
                set.rejected.push(candidate);
            }
        }
    }
    Ok(set)
}

/// The admissible candidates of one step, in deterministic order.
pub fn generate_candidates(
    template: &NetworkTemplate,
    parents: &[ParentRef<'_>],
    budget: StepBudget,
    params: &GrowthParams,
) -> Result<Vec<Candidate>, CandidateError> {
    Ok(collect_candidates(template, parents, budget, params)?.accepted)
}
