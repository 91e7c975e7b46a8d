//! Shared fixtures: a two-stage plain-conv template with a closed-form MACs
//! formula, and a straight-line reimplementation of the greedy search used as
//! an oracle for the engine.
#![allow(dead_code)]

use stagegrow::estimator::SurrogateParams;
use stagegrow::{ArchConfig, GrowthParams, NetworkTemplate, Ratio};

pub const STEM: u64 = 8;
pub const HEAD: u64 = 16;
pub const CLASSES: u64 = 10;

/// Stem 3->8 (3x3, s1), stage 0 plain 3x3 s1, stage 1 plain 3x3 s2, head 16, 10 classes.
pub fn toy_template(base_res: u32, w0: u32, w1: u32) -> NetworkTemplate {
    NetworkTemplate::from_json(&format!(
        r#"{{"stem": {{"out_channels": {STEM}, "kernel": 3, "stride": 1}},
            "stages": [
              {{"block": {{"kind": "plain_conv", "kernel": 3}}, "stride": 1, "base_width": {w0}, "base_depth": 1}},
              {{"block": {{"kind": "plain_conv", "kernel": 3}}, "stride": 2, "base_width": {w1}, "base_depth": 1}}],
            "head": {{"channels": {HEAD}, "num_classes": {CLASSES}}},
            "base_resolution": {base_res}}}"#
    ))
    .unwrap()
}

/// Toy config as a plain tuple: (r, [w0, w1], [d0, d1]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Toy {
    pub r: u64,
    pub w: [u64; 2],
    pub d: [u64; 2],
}

/// Per-stage MACs written out by hand for the toy template.
pub fn toy_stage_macs(c: Toy) -> [u64; 2] {
    let a = c.r * c.r;
    let h = c.r.div_ceil(2);
    let b = h * h;
    [
        a * STEM * c.w[0] * 9 + (c.d[0] - 1) * a * c.w[0] * c.w[0] * 9,
        b * c.w[0] * c.w[1] * 9 + (c.d[1] - 1) * b * c.w[1] * c.w[1] * 9,
    ]
}

pub fn toy_macs(c: Toy) -> u64 {
    let a = c.r * c.r;
    let h = c.r.div_ceil(2);
    let b = h * h;
    let [s0, s1] = toy_stage_macs(c);
    a * 3 * STEM * 9 + s0 + s1 + b * c.w[1] * HEAD + b * HEAD + HEAD * CLASSES
}

pub fn to_toy(c: &ArchConfig) -> Toy {
    Toy {
        r: c.resolution() as u64,
        w: [c.widths()[0] as u64, c.widths()[1] as u64],
        d: [c.depths()[0] as u64, c.depths()[1] as u64],
    }
}

pub fn from_toy(t: &NetworkTemplate, c: Toy) -> ArchConfig {
    ArchConfig::new(
        t,
        c.r as u32,
        vec![c.w[0] as u32, c.w[1] as u32],
        vec![c.d[0] as u32, c.d[1] as u32],
    )
    .unwrap()
}

/// Noise-free surrogate evaluated from the hand-written stage MACs.
pub fn toy_accuracy(p: &SurrogateParams, c: Toy) -> f64 {
    let m = toy_stage_macs(c);
    let mut s = 0.0;
    for ((w, scale), m) in p.stage_weights.iter().zip(&p.stage_scales).zip(m) {
        s += w * (1.0 - (-(m as f64) / scale).exp());
    }
    let r = p.resolution_weight * (1.0 - (-(c.r as f64) / p.resolution_scale).exp());
    (s + r).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct Bounds {
    pub max_r: u64,
    pub max_w: [u64; 2],
    pub max_d: [u64; 2],
}

pub fn toy_bounds(t: &NetworkTemplate) -> Bounds {
    Bounds {
        max_r: t.max_resolution as u64,
        max_w: [t.stages[0].max_width as u64, t.stages[1].max_width as u64],
        max_d: [t.stages[0].max_depth as u64, t.stages[1].max_depth as u64],
    }
}

/// `(num, den)` pairs for an exact `<=` against a rational.
fn frac(r: Ratio) -> (u128, u128) {
    (r.numer() as u128, r.denom() as u128)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleCandidate {
    pub config: Toy,
    pub macs: u64,
    pub parent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleStep {
    Selected {
        step_target: u64,
        candidates: Vec<OracleCandidate>,
        selected: usize,
    },
    Empty {
        step_target: u64,
    },
}

/// `round(b0 * (t / b0)^(i / n))`, pinned at the last step.
pub fn oracle_schedule(b0: u64, t: u64, n: u32, i: u32) -> u64 {
    if i == n {
        return t;
    }
    (b0 as f64 * (t as f64 / b0 as f64).powf(i as f64 / n as f64)).round() as u64
}

/// Straight-line greedy search over the toy template.
pub fn oracle_search(
    bounds: Bounds,
    base: Toy,
    target: u64,
    iterations: u32,
    g: &GrowthParams,
    params: &SurrogateParams,
) -> Vec<OracleStep> {
    let (dn, dd) = frac(g.delta);
    let sr = g.resolution_step as u64;
    let sd = g.depth_step as u64;
    let sw = g.width_step as u64;
    let b0 = toy_macs(base);
    let mut s: Vec<Toy> = vec![base];
    let mut steps = Vec::new();
    for i in 1..=iterations {
        let ti = oracle_schedule(b0, target, iterations, i);
        let ok = |m: u64| (m.abs_diff(ti) as u128) * dd <= dn * target as u128;
        let mut found: Vec<OracleCandidate> = Vec::new();
        let push = |c: Toy, parent: usize, found: &mut Vec<OracleCandidate>| {
            let m = toy_macs(c);
            if ok(m) && !found.iter().any(|f| f.config == c) {
                found.push(OracleCandidate {
                    config: c,
                    macs: m,
                    parent,
                });
            }
        };
        for (k, &parent) in s.iter().enumerate() {
            if toy_macs(parent) > ti {
                continue;
            }
            let mut c = parent;
            while toy_macs(c) < ti && c.r + sr <= bounds.max_r {
                c.r += sr;
            }
            push(c, k, &mut found);
            for j in 0..2 {
                for &p in &g.ratios {
                    let (pn, pd) = frac(p);
                    let mut c = parent;
                    while (toy_macs(c) as u128) * pd <= pn * ti as u128
                        && c.d[j] + sd <= bounds.max_d[j]
                    {
                        c.d[j] += sd;
                    }
                    while toy_macs(c) <= ti && c.w[j] + sw <= bounds.max_w[j] {
                        c.w[j] += sw;
                    }
                    push(c, k, &mut found);
                }
            }
        }
        if found.is_empty() {
            steps.push(OracleStep::Empty { step_target: ti });
            break;
        }
        let mut best = 0;
        for k in 1..found.len() {
            let a = toy_accuracy(params, found[k].config);
            let b = toy_accuracy(params, found[best].config);
            if a > b || (a == b && found[k].macs < found[best].macs) {
                best = k;
            }
        }
        s.push(found[best].config);
        steps.push(OracleStep::Selected {
            step_target: ti,
            candidates: found,
            selected: best,
        });
    }
    steps
}

/// Deterministic generator for randomized specs (splitmix64).
pub struct Rng(pub u64);

impl Rng {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `lo..=hi`.
    pub fn range(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.next() % (hi - lo + 1)
    }
}

/// A randomized toy search: template, base, target and iteration count.
pub struct ToySpec {
    pub template: NetworkTemplate,
    pub target: u64,
    pub iterations: u32,
}

pub fn random_toy_spec(rng: &mut Rng) -> ToySpec {
    let base_res = 8 * rng.range(3, 8) as u32;
    let w0 = 2 * rng.range(8, 24) as u32;
    let w1 = 2 * rng.range(16, 48) as u32;
    let template = toy_template(base_res, w0, w1);
    let b0 = toy_macs(to_toy(&template.base_config()));
    // Target between 1.3x and 3x the base.
    let target = b0 + b0 * rng.range(30, 200) / 100;
    let iterations = rng.range(1, 4) as u32;
    ToySpec {
        template,
        target,
        iterations,
    }
}

/// Growth parameters of the oracle-equivalence suite: `s_w = 2`, `s_d = 1`, `P = {0, 1/2, 1}`.
pub fn oracle_growth() -> GrowthParams {
    GrowthParams {
        ratios: vec![Ratio::ZERO, Ratio::new(1, 2).unwrap(), Ratio::ONE],
        ..GrowthParams::default()
    }
}
