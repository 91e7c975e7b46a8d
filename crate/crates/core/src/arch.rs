//! Stage-structured network templates and points in the search space.
//!
//! A [`NetworkTemplate`] is the immutable description of a base network: a
//! stem, an ordered list of stages and a classification head. Each stage has
//! one block kind and a stride applied by its first block. An [`ArchConfig`]
//! picks an input resolution plus a width and a depth for every stage; it is
//! only ever constructed inside the bounds of its template.
//!
//! Template documents are JSON. Stage bounds are optional in the document and
//! default to three times the base width/depth; the resolution range defaults
//! to `[base_resolution, 3 * base_resolution]`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ratio::Ratio;

/// Image channels fed to the stem.
pub const INPUT_CHANNELS: u32 = 3;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("kernel size must be odd and >= 1, got {0}")]
    InvalidKernel(u32),
    #[error("expansion ratio must be positive")]
    InvalidExpansion,
    #[error("se ratio must lie in [0, 1], got {0}")]
    InvalidSeRatio(Ratio),
    #[error("stride must be 1 or 2, got {0}")]
    InvalidStride(u32),
    #[error("template must contain at least one stage")]
    NoStages,
    #[error("stage {stage}: {message}")]
    InvalidStage { stage: usize, message: String },
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("config has {found} stages, template has {expected}")]
    StageCountMismatch { expected: usize, found: usize },
    #[error("resolution {value} outside [{min}, {max}]")]
    ResolutionOutOfBounds { value: u32, min: u32, max: u32 },
    #[error("stage {stage} width {value} outside [{min}, {max}]")]
    WidthOutOfBounds {
        stage: usize,
        value: u32,
        min: u32,
        max: u32,
    },
    #[error("stage {stage} depth {value} outside [{min}, {max}]")]
    DepthOutOfBounds {
        stage: usize,
        value: u32,
        min: u32,
        max: u32,
    },
    #[error("stage index {index} out of range for {stages} stages")]
    StageIndex { index: usize, stages: usize },
    #[error("{path}:{line}:{column}: {message}\n    {context}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
        context: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The building block repeated inside a stage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockKind {
    /// Inverted residual: expand 1x1, depthwise kxk, optional SE, project 1x1.
    Mbconv {
        expansion: Ratio,
        kernel: u32,
        #[serde(default)]
        se_ratio: Ratio,
    },
    /// Ghost bottleneck: ghost module, optional strided depthwise, SE, ghost module.
    Ghost {
        expansion: Ratio,
        kernel: u32,
        #[serde(default)]
        se_ratio: Ratio,
    },
    /// Two kxk convolutions with a projection shortcut when shapes change.
    ResidualBasic { kernel: u32 },
    /// A single kxk convolution.
    PlainConv { kernel: u32 },
}

impl BlockKind {
    pub fn kernel(&self) -> u32 {
        match *self {
            BlockKind::Mbconv { kernel, .. }
            | BlockKind::Ghost { kernel, .. }
            | BlockKind::ResidualBasic { kernel }
            | BlockKind::PlainConv { kernel } => kernel,
        }
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let kernel = self.kernel();
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(ArchError::InvalidKernel(kernel));
        }
        match self {
            BlockKind::Mbconv {
                expansion,
                se_ratio,
                ..
            }
            | BlockKind::Ghost {
                expansion,
                se_ratio,
                ..
            } => {
                if expansion.is_zero() {
                    return Err(ArchError::InvalidExpansion);
                }
                if *se_ratio > Ratio::ONE {
                    return Err(ArchError::InvalidSeRatio(*se_ratio));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stem {
    pub out_channels: u32,
    pub kernel: u32,
    pub stride: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Head {
    pub channels: u32,
    pub num_classes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct StageTemplate {
    pub block: BlockKind,
    pub stride: u32,
    pub base_width: u32,
    pub base_depth: u32,
    pub max_width: u32,
    pub max_depth: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StageDoc {
    block: BlockKind,
    stride: u32,
    base_width: u32,
    base_depth: u32,
    max_width: Option<u32>,
    max_depth: Option<u32>,
}

impl<'de> Deserialize<'de> for StageTemplate {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = StageDoc::deserialize(deserializer)?;
        Ok(StageTemplate {
            max_width: doc.max_width.unwrap_or(doc.base_width.saturating_mul(3)),
            max_depth: doc.max_depth.unwrap_or(doc.base_depth.saturating_mul(3)),
            block: doc.block,
            stride: doc.stride,
            base_width: doc.base_width,
            base_depth: doc.base_depth,
        })
    }
}

impl StageTemplate {
    fn validate(&self, stage: usize) -> Result<(), ArchError> {
        let invalid = |message: String| ArchError::InvalidStage { stage, message };
        self.block.validate().map_err(|e| invalid(e.to_string()))?;
        if self.stride != 1 && self.stride != 2 {
            return Err(invalid(format!(
                "stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.base_width == 0 || self.base_depth == 0 {
            return Err(invalid("base width and depth must be positive".into()));
        }
        if self.base_width > self.max_width {
            return Err(invalid(format!(
                "base_width {} exceeds max_width {}",
                self.base_width, self.max_width
            )));
        }
        if self.base_depth > self.max_depth {
            return Err(invalid(format!(
                "base_depth {} exceeds max_depth {}",
                self.base_depth, self.max_depth
            )));
        }
        Ok(())
    }
}

/// Immutable structural description of a base network.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct NetworkTemplate {
    pub stem: Stem,
    pub stages: Vec<StageTemplate>,
    pub head: Head,
    pub base_resolution: u32,
    pub min_resolution: u32,
    pub max_resolution: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateDoc {
    stem: Stem,
    stages: Vec<StageTemplate>,
    head: Head,
    base_resolution: u32,
    min_resolution: Option<u32>,
    max_resolution: Option<u32>,
}

impl<'de> Deserialize<'de> for NetworkTemplate {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = TemplateDoc::deserialize(deserializer)?;
        let template = NetworkTemplate {
            min_resolution: doc.min_resolution.unwrap_or(doc.base_resolution),
            max_resolution: doc
                .max_resolution
                .unwrap_or(doc.base_resolution.saturating_mul(3)),
            stem: doc.stem,
            stages: doc.stages,
            head: doc.head,
            base_resolution: doc.base_resolution,
        };
        template.validate().map_err(serde::de::Error::custom)?;
        Ok(template)
    }
}

impl NetworkTemplate {
    pub fn validate(&self) -> Result<(), ArchError> {
        if self.stages.is_empty() {
            return Err(ArchError::NoStages);
        }
        if self.stem.out_channels == 0 || self.head.channels == 0 || self.head.num_classes == 0 {
            return Err(ArchError::InvalidTemplate(
                "stem and head channel counts must be positive".into(),
            ));
        }
        if self.stem.kernel == 0 || self.stem.kernel.is_multiple_of(2) {
            return Err(ArchError::InvalidKernel(self.stem.kernel));
        }
        if self.stem.stride != 1 && self.stem.stride != 2 {
            return Err(ArchError::InvalidStride(self.stem.stride));
        }
        if self.min_resolution == 0
            || self.min_resolution > self.base_resolution
            || self.base_resolution > self.max_resolution
        {
            return Err(ArchError::InvalidTemplate(format!(
                "resolutions must satisfy 0 < min ({}) <= base ({}) <= max ({})",
                self.min_resolution, self.base_resolution, self.max_resolution
            )));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            stage.validate(i)?;
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn from_json(text: &str) -> Result<Self, ArchError> {
        parse_json(text, "<template>")
    }

    pub fn load(path: &Path) -> Result<Self, ArchError> {
        let text = std::fs::read_to_string(path).map_err(|source| ArchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        parse_json(&text, &path.display().to_string())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("template serializes")
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("template serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// The starting point of the search: base resolution, widths and depths.
    pub fn base_config(&self) -> ArchConfig {
        ArchConfig {
            resolution: self.base_resolution,
            widths: self.stages.iter().map(|s| s.base_width).collect(),
            depths: self.stages.iter().map(|s| s.base_depth).collect(),
        }
    }

    /// Checks every bound of `config` against this template.
    pub fn check(&self, config: &ArchConfig) -> Result<(), ArchError> {
        let stages = self.num_stages();
        for found in [config.widths.len(), config.depths.len()] {
            if found != stages {
                return Err(ArchError::StageCountMismatch {
                    expected: stages,
                    found,
                });
            }
        }
        if config.resolution < self.min_resolution || config.resolution > self.max_resolution {
            return Err(ArchError::ResolutionOutOfBounds {
                value: config.resolution,
                min: self.min_resolution,
                max: self.max_resolution,
            });
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let (w, d) = (config.widths[i], config.depths[i]);
            if w < stage.base_width || w > stage.max_width {
                return Err(ArchError::WidthOutOfBounds {
                    stage: i,
                    value: w,
                    min: stage.base_width,
                    max: stage.max_width,
                });
            }
            if d < stage.base_depth || d > stage.max_depth {
                return Err(ArchError::DepthOutOfBounds {
                    stage: i,
                    value: d,
                    min: stage.base_depth,
                    max: stage.max_depth,
                });
            }
        }
        Ok(())
    }
}

/// Parses JSON and reports errors with the offending source line.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(
    text: &str,
    path: &str,
) -> Result<T, ArchError> {
    serde_json::from_str(text).map_err(|e| {
        let line = e.line();
        let context = text
            .lines()
            .nth(line.saturating_sub(1))
            .unwrap_or_default()
            .trim_end()
            .to_string();
        ArchError::Parse {
            path: path.to_string(),
            line,
            column: e.column(),
            message: e.to_string(),
            context,
        }
    })
}

/// One point of the search space: input resolution plus per-stage width and depth.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    resolution: u32,
    widths: Vec<u32>,
    depths: Vec<u32>,
}

impl ArchConfig {
    /// Builds a config, rejecting anything outside the template's bounds.
    pub fn new(
        template: &NetworkTemplate,
        resolution: u32,
        widths: Vec<u32>,
        depths: Vec<u32>,
    ) -> Result<Self, ArchError> {
        let config = ArchConfig {
            resolution,
            widths,
            depths,
        };
        template.check(&config)?;
        Ok(config)
    }

    pub fn from_json(template: &NetworkTemplate, text: &str) -> Result<Self, ArchError> {
        let config: ArchConfig = parse_json(text, "<config>")?;
        template.check(&config)?;
        Ok(config)
    }

    pub fn load(template: &NetworkTemplate, path: &Path) -> Result<Self, ArchError> {
        let text = std::fs::read_to_string(path).map_err(|source| ArchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: ArchConfig = parse_json(&text, &path.display().to_string())?;
        template.check(&config)?;
        Ok(config)
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn widths(&self) -> &[u32] {
        &self.widths
    }

    pub fn depths(&self) -> &[u32] {
        &self.depths
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn with_resolution(
        &self,
        template: &NetworkTemplate,
        resolution: u32,
    ) -> Result<Self, ArchError> {
        ArchConfig::new(
            template,
            resolution,
            self.widths.clone(),
            self.depths.clone(),
        )
    }

    /// Replaces width and depth of stage `stage`.
    pub fn with_stage(
        &self,
        template: &NetworkTemplate,
        stage: usize,
        width: u32,
        depth: u32,
    ) -> Result<Self, ArchError> {
        if stage >= self.num_stages() {
            return Err(ArchError::StageIndex {
                index: stage,
                stages: self.num_stages(),
            });
        }
        let mut widths = self.widths.clone();
        let mut depths = self.depths.clone();
        widths[stage] = width;
        depths[stage] = depth;
        ArchConfig::new(template, self.resolution, widths, depths)
    }

    /// Element-wise `>=` over resolution, every width and every depth.
    pub fn dominates(&self, other: &ArchConfig) -> Result<bool, ArchError> {
        if self.num_stages() != other.num_stages() || self.depths.len() != other.depths.len() {
            return Err(ArchError::StageCountMismatch {
                expected: self.num_stages(),
                found: other.num_stages(),
            });
        }
        Ok(self.resolution >= other.resolution
            && self.widths.iter().zip(&other.widths).all(|(a, b)| a >= b)
            && self.depths.iter().zip(&other.depths).all(|(a, b)| a >= b))
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "r={} w={:?} d={:?}",
            self.resolution, self.widths, self.depths
        )
    }
}
