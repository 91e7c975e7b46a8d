//! Multiply-accumulate and parameter accounting.
//!
//! One multiply-add counts as one MAC. Spatial sizes shrink by ceiling
//! division at every stride-2 layer ("same" padding). Squeeze-excitation and
//! global-pooling costs are included; activations and batch norm are not
//! counted as MACs, but batch-norm scale and shift show up as two parameters
//! per output channel of every convolution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchConfig, ArchError, BlockKind, NetworkTemplate, INPUT_CHANNELS};

/// Channels of a ghost module produced by the primary 1x1 conv are
/// `ceil(c_out / GHOST_RATIO)`; the rest come from a cheap depthwise op.
pub const GHOST_RATIO: u32 = 2;
/// Kernel of the ghost module's cheap depthwise operation.
pub const GHOST_CHEAP_KERNEL: u32 = 3;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("conv dimensions must be positive")]
    ZeroDimension,
    #[error("channels {c_in}->{c_out} not divisible by {groups} groups")]
    GroupDivisibility { c_in: u32, c_out: u32, groups: u32 },
    #[error(transparent)]
    Arch(#[from] ArchError),
}

/// Cost of a layer or a group of layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub macs: u64,
    pub params: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, rhs: Cost) -> Cost {
        Cost {
            macs: self.macs + rhs.macs,
            params: self.params + rhs.params,
        }
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacsBreakdown {
    pub stem_macs: u64,
    pub per_stage_macs: Vec<u64>,
    pub head_macs: u64,
    pub total_macs: u64,
    pub total_params: u64,
}

/// `h_out * w_out * (c_in / groups) * c_out * k^2`.
pub fn conv_macs(
    h_out: u32,
    w_out: u32,
    c_in: u32,
    c_out: u32,
    kernel: u32,
    groups: u32,
) -> Result<u64, CostError> {
    Ok(conv(h_out, w_out, c_in, c_out, kernel, groups)?.macs)
}

/// Convolution cost; params are weights plus batch-norm scale and shift.
pub fn conv(
    h_out: u32,
    w_out: u32,
    c_in: u32,
    c_out: u32,
    kernel: u32,
    groups: u32,
) -> Result<Cost, CostError> {
    if h_out == 0 || w_out == 0 || c_in == 0 || c_out == 0 || kernel == 0 || groups == 0 {
        return Err(CostError::ZeroDimension);
    }
    if !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
        return Err(CostError::GroupDivisibility {
            c_in,
            c_out,
            groups,
        });
    }
    let weights = (c_in / groups) as u64 * c_out as u64 * kernel as u64 * kernel as u64;
    Ok(Cost {
        macs: h_out as u64 * w_out as u64 * weights,
        params: weights + 2 * c_out as u64,
    })
}

fn depthwise(h: u32, w: u32, channels: u32, kernel: u32) -> Result<Cost, CostError> {
    conv(h, w, channels, channels, kernel, channels)
}

/// Global pool, then reduce and expand 1x1 convs (with bias) on a 1x1 map.
fn squeeze_excite(h: u32, w: u32, channels: u32, se_ratio: crate::Ratio) -> Cost {
    if se_ratio.is_zero() {
        return Cost::default();
    }
    let reduced = se_ratio.floor_mul(channels as u64).max(1);
    let c = channels as u64;
    Cost {
        macs: h as u64 * w as u64 * c + 2 * c * reduced,
        params: 2 * c * reduced + reduced + c,
    }
}

fn ghost_module(h: u32, w: u32, c_in: u32, c_out: u32) -> Result<Cost, CostError> {
    let primary = c_out.div_ceil(GHOST_RATIO);
    let cheap = primary * (GHOST_RATIO - 1);
    Ok(conv(h, w, c_in, primary, 1, 1)? + conv(h, w, primary, cheap, GHOST_CHEAP_KERNEL, primary)?)
}

fn expanded(c_in: u32, expansion: crate::Ratio) -> u32 {
    (expansion.floor_mul(c_in as u64) as u32).max(1)
}

/// Output spatial size of a `stride` layer under "same" padding.
pub fn strided(size: u32, stride: u32) -> u32 {
    size.div_ceil(stride)
}

/// Cost of one block mapping `c_in` to `c_out` channels.
pub fn block_cost(
    block: &BlockKind,
    c_in: u32,
    c_out: u32,
    h_in: u32,
    w_in: u32,
    stride: u32,
) -> Result<Cost, CostError> {
    let (h_out, w_out) = (strided(h_in, stride), strided(w_in, stride));
    let cost = match *block {
        BlockKind::PlainConv { kernel } => conv(h_out, w_out, c_in, c_out, kernel, 1)?,
        BlockKind::ResidualBasic { kernel } => {
            let mut cost = conv(h_out, w_out, c_in, c_out, kernel, 1)?
                + conv(h_out, w_out, c_out, c_out, kernel, 1)?;
            if stride != 1 || c_in != c_out {
                cost += conv(h_out, w_out, c_in, c_out, 1, 1)?;
            }
            cost
        }
        BlockKind::Mbconv {
            expansion,
            kernel,
            se_ratio,
        } => {
            let mid = expanded(c_in, expansion);
            let mut cost = Cost::default();
            if expansion != crate::Ratio::ONE {
                cost += conv(h_in, w_in, c_in, mid, 1, 1)?;
            }
            cost += depthwise(h_out, w_out, mid, kernel)?;
            cost += squeeze_excite(h_out, w_out, mid, se_ratio);
            cost += conv(h_out, w_out, mid, c_out, 1, 1)?;
            cost
        }
        BlockKind::Ghost {
            expansion,
            kernel,
            se_ratio,
        } => {
            let mid = expanded(c_in, expansion);
            let mut cost = ghost_module(h_in, w_in, c_in, mid)?;
            if stride != 1 {
                cost += depthwise(h_out, w_out, mid, kernel)?;
            }
            cost += squeeze_excite(h_out, w_out, mid, se_ratio);
            cost += ghost_module(h_out, w_out, mid, c_out)?;
            if stride != 1 || c_in != c_out {
                cost += depthwise(h_out, w_out, c_in, kernel)?;
                cost += conv(h_out, w_out, c_in, c_out, 1, 1)?;
            }
            cost
        }
    };
    Ok(cost)
}

pub fn block_macs(
    block: &BlockKind,
    c_in: u32,
    c_out: u32,
    h_in: u32,
    w_in: u32,
    stride: u32,
) -> Result<u64, CostError> {
    Ok(block_cost(block, c_in, c_out, h_in, w_in, stride)?.macs)
}

/// Per-part costs of a whole network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkCost {
    pub stem: Cost,
    pub stages: Vec<Cost>,
    pub head: Cost,
    /// Square input size seen by each stage.
    pub stage_inputs: Vec<u32>,
    /// Square output size of each stage.
    pub stage_outputs: Vec<u32>,
}

impl NetworkCost {
    pub fn total(&self) -> Cost {
        self.stem + self.stages.iter().copied().sum::<Cost>() + self.head
    }

    pub fn breakdown(&self) -> MacsBreakdown {
        let total = self.total();
        MacsBreakdown {
            stem_macs: self.stem.macs,
            per_stage_macs: self.stages.iter().map(|c| c.macs).collect(),
            head_macs: self.head.macs,
            total_macs: total.macs,
            total_params: total.params,
        }
    }
}

pub fn network_cost(
    template: &NetworkTemplate,
    config: &ArchConfig,
) -> Result<NetworkCost, CostError> {
    template.check(config)?;
    let mut size = strided(config.resolution(), template.stem.stride);
    let stem = conv(
        size,
        size,
        INPUT_CHANNELS,
        template.stem.out_channels,
        template.stem.kernel,
        1,
    )?;

    let mut c_prev = template.stem.out_channels;
    let mut stages = Vec::with_capacity(template.num_stages());
    let mut stage_inputs = Vec::with_capacity(template.num_stages());
    let mut stage_outputs = Vec::with_capacity(template.num_stages());
    for (i, stage) in template.stages.iter().enumerate() {
        let width = config.widths()[i];
        let depth = config.depths()[i];
        stage_inputs.push(size);
        let first = block_cost(&stage.block, c_prev, width, size, size, stage.stride)?;
        size = strided(size, stage.stride);
        let repeat = if depth > 1 {
            block_cost(&stage.block, width, width, size, size, 1)?
        } else {
            Cost::default()
        };
        stages.push(Cost {
            macs: first.macs + repeat.macs * (depth as u64 - 1),
            params: first.params + repeat.params * (depth as u64 - 1),
        });
        stage_outputs.push(size);
        c_prev = width;
    }

    let head_channels = template.head.channels as u64;
    let classes = template.head.num_classes as u64;
    let head = conv(size, size, c_prev, template.head.channels, 1, 1)?
        + Cost {
            macs: size as u64 * size as u64 * head_channels + head_channels * classes,
            params: head_channels * classes + classes,
        };

    Ok(NetworkCost {
        stem,
        stages,
        head,
        stage_inputs,
        stage_outputs,
    })
}

pub fn network_macs(
    template: &NetworkTemplate,
    config: &ArchConfig,
) -> Result<MacsBreakdown, CostError> {
    Ok(network_cost(template, config)?.breakdown())
}

/// Total MACs only.
pub fn total_macs(template: &NetworkTemplate, config: &ArchConfig) -> Result<u64, CostError> {
    Ok(network_cost(template, config)?.total().macs)
}

pub fn params_count(template: &NetworkTemplate, config: &ArchConfig) -> Result<u64, CostError> {
    Ok(network_cost(template, config)?.total().params)
}

/// Body MACs grouped by feature-map size: consecutive template stages whose
/// outputs share a spatial size form one group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialStage {
    pub spatial: u32,
    pub stages: Vec<usize>,
    pub macs: u64,
}

pub fn spatial_profile(
    template: &NetworkTemplate,
    config: &ArchConfig,
) -> Result<Vec<SpatialStage>, CostError> {
    let cost = network_cost(template, config)?;
    let mut groups: Vec<SpatialStage> = Vec::new();
    for (i, (stage, &spatial)) in cost.stages.iter().zip(&cost.stage_outputs).enumerate() {
        match groups.last_mut() {
            Some(last) if last.spatial == spatial => {
                last.stages.push(i);
                last.macs += stage.macs;
            }
            _ => groups.push(SpatialStage {
                spatial,
                stages: vec![i],
                macs: stage.macs,
            }),
        }
    }
    Ok(groups)
}
