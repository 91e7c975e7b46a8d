use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RankError {
    #[error("score lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 scores, got {0}")]
    TooShort(usize),
    #[error("score at position {0} is not finite")]
    NonFinite(usize),
}

/// A rank correlation, or `Undefined` when either side has zero rank variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Correlation {
    Value(f64),
    Undefined(UndefinedMarker),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedMarker {
    Undefined,
}

impl Correlation {
    pub const UNDEFINED: Correlation = Correlation::Undefined(UndefinedMarker::Undefined);

    pub fn value(&self) -> Option<f64> {
        match *self {
            Correlation::Value(v) => Some(v),
            Correlation::Undefined(_) => None,
        }
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correlation::Value(v) => write!(f, "{v:.6}"),
            Correlation::Undefined(_) => f.write_str("undefined"),
        }
    }
}

/// 1-based ranks; tied values share the mean of the positions they occupy.
pub fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let mean = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean;
        }
        start = end;
    }
    ranks
}

fn has_ties(ranks: &[f64]) -> bool {
    ranks.iter().any(|r| r.fract() != 0.0) || {
        let mut sorted = ranks.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.windows(2).any(|w| w[0] == w[1])
    }
}

/// Spearman's rank correlation with average-rank tie handling.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Correlation, RankError> {
    if x.len() != y.len() {
        return Err(RankError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(RankError::TooShort(n));
    }
    if let Some(i) = x
        .iter()
        .zip(y)
        .position(|(a, b)| !a.is_finite() || !b.is_finite())
    {
        return Err(RankError::NonFinite(i));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);

    if !has_ties(&rx) && !has_ties(&ry) {
        // Integer ranks: 1 - 6 sum d^2 / (n (n^2 - 1)) with an exact sum.
        let d2: u128 = rx
            .iter()
            .zip(&ry)
            .map(|(a, b)| {
                let d = (*a as i64 - *b as i64).unsigned_abs() as u128;
                d * d
            })
            .sum();
        let n = n as u128;
        let rho = 1.0 - (6 * d2) as f64 / (n * (n * n - 1)) as f64;
        return Ok(Correlation::Value(rho));
    }

    let mean = (n as f64 + 1.0) / 2.0;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        cov += da * db;
        vx += da * da;
        vy += db * db;
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(Correlation::UNDEFINED);
    }
    Ok(Correlation::Value(
        (cov / (vx * vy).sqrt()).clamp(-1.0, 1.0),
    ))
}
