use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvaluationResult, Evaluator};
use crate::arch::{ArchConfig, NetworkTemplate};
use crate::cost::network_cost;

/// Parameters of the closed-form surrogate
///
/// ```text
/// acc = clamp( sum_i a_i * (1 - exp(-m_i / b_i)) + c * (1 - exp(-r / rho0)) + eta, 0, 1 )
/// ```
///
/// where `m_i` are per-stage MACs and `eta = noise * u(seed, config)` with
/// `u` in `[-1, 1)` (see [`config_noise`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateParams {
    /// `b_i`, in MACs.
    pub stage_scales: Vec<f64>,
    /// `a_i`, summing to at most 1.
    pub stage_weights: Vec<f64>,
    /// `rho0`, in pixels.
    pub resolution_scale: f64,
    /// `c`.
    pub resolution_weight: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SurrogateParams {
    /// Saturation scales at the base network's per-stage MACs, equal stage
    /// weights totalling 0.8, and a 0.15 resolution term scaled at the base
    /// resolution. Noise-free.
    pub fn for_template(template: &NetworkTemplate) -> Self {
        let cost = network_cost(template, &template.base_config()).expect("base config is valid");
        let stages = template.num_stages();
        SurrogateParams {
            stage_scales: cost.stages.iter().map(|c| c.macs as f64).collect(),
            stage_weights: vec![0.8 / stages as f64; stages],
            resolution_scale: template.base_resolution as f64,
            resolution_weight: 0.15,
            noise: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Invalid(format!("surrogate params: {m}")));
        if self.stage_scales.len() != self.stage_weights.len() {
            return bad("stage_scales and stage_weights differ in length");
        }
        if self
            .stage_scales
            .iter()
            .any(|b| !(*b > 0.0 && b.is_finite()))
        {
            return bad("stage scales must be positive");
        }
        if self
            .stage_weights
            .iter()
            .any(|a| !(*a > 0.0 && a.is_finite()))
        {
            return bad("stage weights must be positive");
        }
        if self.stage_weights.iter().sum::<f64>() > 1.0 + 1e-12 {
            return bad("stage weights must sum to at most 1");
        }
        if !(self.resolution_scale > 0.0 && self.resolution_scale.is_finite()) {
            return bad("resolution scale must be positive");
        }
        if !(self.resolution_weight > 0.0 && self.resolution_weight.is_finite()) {
            return bad("resolution weight must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative");
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic value in `[-1, 1)` keyed by the seed and the configuration.
///
/// The key folds `seed`, the resolution, the stage count, all widths and then
/// all depths through `h = splitmix64(h ^ v)`, starting from `h = splitmix64(seed)`.
/// The top 53 bits of the final state give `u = 2 * (h >> 11) / 2^53 - 1`.
pub fn config_noise(seed: u64, config: &ArchConfig) -> f64 {
    let mut h = splitmix64(seed);
    let values = [config.resolution() as u64, config.num_stages() as u64]
        .into_iter()
        .chain(config.widths().iter().map(|&w| w as u64))
        .chain(config.depths().iter().map(|&d| d as u64));
    for v in values {
        h = splitmix64(h ^ v);
    }
    2.0 * ((h >> 11) as f64 / (1u64 << 53) as f64) - 1.0
}

#[derive(Debug, Clone)]
pub struct Surrogate {
    params: SurrogateParams,
}

impl Surrogate {
    pub fn new(params: SurrogateParams) -> Result<Self, EvalError> {
        params.validate()?;
        Ok(Surrogate { params })
    }

    pub fn params(&self) -> &SurrogateParams {
        &self.params
    }

    pub fn accuracy(
        &self,
        template: &NetworkTemplate,
        config: &ArchConfig,
    ) -> Result<f64, EvalError> {
        let p = &self.params;
        if p.stage_scales.len() != template.num_stages() {
            return Err(EvalError::Invalid(format!(
                "surrogate has {} stages, template has {}",
                p.stage_scales.len(),
                template.num_stages()
            )));
        }
        let cost = network_cost(template, config)?;
        let stage_term: f64 = cost
            .stages
            .iter()
            .zip(p.stage_scales.iter().zip(&p.stage_weights))
            .map(|(m, (b, a))| a * (1.0 - (-(m.macs as f64) / b).exp()))
            .sum();
        let resolution_term = p.resolution_weight
            * (1.0 - (-(config.resolution() as f64) / p.resolution_scale).exp());
        let noise = if p.noise == 0.0 {
            0.0
        } else {
            p.noise * config_noise(p.seed, config)
        };
        Ok((stage_term + resolution_term + noise).clamp(0.0, 1.0))
    }
}

impl Evaluator for Surrogate {
    fn evaluate(
        &self,
        template: &NetworkTemplate,
        config: &ArchConfig,
        _budget_macs: u64,
    ) -> Result<EvaluationResult, EvalError> {
        let accuracy = self.accuracy(template, config)?;
        Ok(EvaluationResult {
            accuracy,
            meta: BTreeMap::from([("evaluator".to_string(), "surrogate".into())]),
            duration: std::time::Duration::ZERO,
        })
    }
}
