//! Two-stream encoder with in-stage skip-cross fusion and a fused decoder.

mod checkpoint;
mod net;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use checkpoint::{load_weights, load_weights_into, save_weights};
pub use net::{fuse_stage, Modality, NetworkOutput, SkipcrossNet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("unknown strategy `{0}` (expected skipcross, early, middle, late, cross or camera)")]
    UnknownStrategy(String),
    #[error("input {height}x{width} is not divisible by 16")]
    Indivisible { height: usize, width: usize },
    #[error("{what}: expected {expected:?}, got {got:?}")]
    InputShape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("no parameter named `{0}`")]
    UnknownParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint topology mismatch: network has {expected}, file has {found}")]
    TopologyMismatch { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Where and how the two modalities are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Every earlier map of one stream feeds every later map of the other.
    Skipcross,
    /// Camera and ADI concatenated at the input of a single stream.
    Early,
    /// One additive exchange at the start of the second stage.
    Middle,
    /// Independent networks whose logits are averaged.
    Late,
    /// Exchange between same-index blocks only.
    Cross,
    /// Camera stream alone.
    Camera,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Skipcross,
        Strategy::Early,
        Strategy::Middle,
        Strategy::Late,
        Strategy::Cross,
        Strategy::Camera,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Skipcross => "skipcross",
            Strategy::Early => "early",
            Strategy::Middle => "middle",
            Strategy::Late => "late",
            Strategy::Cross => "cross",
            Strategy::Camera => "camera",
        }
    }

    /// Whether the network keeps separate camera and LiDAR encoders that
    /// exchange features.
    pub fn is_fused_two_stream(self) -> bool {
        matches!(
            self,
            Strategy::Skipcross | Strategy::Middle | Strategy::Cross
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| ModelError::UnknownStrategy(s.to_string()))
    }
}

/// Stage structure, input channels and fusion enablement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionTopology {
    pub stage_blocks: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub rgb_in_channels: usize,
    pub lidar_in_channels: usize,
    /// Per stage: whether cross connections exist there at all.
    pub encoder_mask: Vec<bool>,
    pub decoder_fusion_enabled: bool,
    pub strategy: Strategy,
}

impl Default for FusionTopology {
    fn default() -> Self {
        Self::with_strategy(Strategy::Skipcross)
    }
}

impl FusionTopology {
    /// Default block and channel schedule for `strategy`.
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self::new(vec![2, 3, 3], vec![32, 64, 128], strategy)
    }

    pub fn new(stage_blocks: Vec<usize>, stage_channels: Vec<usize>, strategy: Strategy) -> Self {
        let stages = stage_blocks.len();
        Self {
            stage_blocks,
            stage_channels,
            rgb_in_channels: 3,
            lidar_in_channels: 1,
            encoder_mask: vec![strategy.is_fused_two_stream(); stages],
            decoder_fusion_enabled: strategy == Strategy::Skipcross,
            strategy,
        }
    }

    /// The same block schedule reconfigured for another strategy.
    pub fn configure_strategy(&self, strategy: Strategy) -> Self {
        let mut t = Self::new(
            self.stage_blocks.clone(),
            self.stage_channels.clone(),
            strategy,
        );
        t.rgb_in_channels = self.rgb_in_channels;
        t.lidar_in_channels = self.lidar_in_channels;
        t
    }

    pub fn stages(&self) -> usize {
        self.stage_blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidTopology(m));
        if self.stage_blocks.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.stage_blocks.len() != self.stage_channels.len() {
            return bad(format!(
                "{} block counts but {} channel widths",
                self.stage_blocks.len(),
                self.stage_channels.len()
            ));
        }
        if self.encoder_mask.len() != self.stage_blocks.len() {
            return bad(format!(
                "encoder mask has {} entries for {} stages",
                self.encoder_mask.len(),
                self.stage_blocks.len()
            ));
        }
        if let Some(s) = self.stage_blocks.iter().position(|&b| b == 0) {
            return bad(format!("stage {} has zero blocks", s + 1));
        }
        if let Some(s) = self.stage_channels.iter().position(|&c| c == 0) {
            return bad(format!("stage {} has zero channels", s + 1));
        }
        if self.rgb_in_channels == 0 || self.lidar_in_channels == 0 {
            return bad("input channel counts must be positive".into());
        }
        if self.strategy == Strategy::Middle && self.stages() < 2 {
            return bad("middle fusion needs at least two stages".into());
        }
        Ok(())
    }

    /// Whether the encoder connection from block output `k - 1` of one
    /// stream into block `j` of the other (1-based, `k <= j`) exists and is
    /// trainable in stage `stage` (0-based).
    pub fn connection_enabled(&self, stage: usize, k: usize, j: usize) -> bool {
        if !self.encoder_mask[stage] {
            return false;
        }
        match self.strategy {
            Strategy::Skipcross => true,
            Strategy::Cross => k == j,
            Strategy::Middle => stage == 1 && k == 1 && j == 1,
            _ => false,
        }
    }

    /// Spatial downsampling of the encoder output.
    pub fn downsampling(&self) -> usize {
        1 << (self.stages() + 1)
    }
}

/// Number of encoder cross scalars for the given per-stage block counts:
/// `B(B+1)` per stage over both directions.
pub fn count_cross_weights(stage_blocks: &[usize]) -> usize {
    stage_blocks.iter().map(|&b| b * (b + 1)).sum()
}
