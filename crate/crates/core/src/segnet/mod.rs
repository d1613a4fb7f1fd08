//! U-Net style segmentation network with a decoupled cross-attention
//! bottleneck, a personal spatial adapter and the shared/personal parameter
//! partition.

mod attention;
mod model;
mod params;

pub use attention::{attend, dca_attention, KVTokens};
pub use model::{compute_local_kv, forward, forward_on_tape, ForwardOptions};
pub use params::{init_model, param_specs, tag_for_name, ParamSpec, ParameterStore, PartitionTag};

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;

/// Normalization epsilon for every instance and group norm in the network.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SegnetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("attention has no key/value tokens")]
    EmptyKV,
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("parameter {name} is tagged {actual:?}, expected {expected:?}")]
    PartitionViolation {
        name: String,
        expected: PartitionTag,
        actual: PartitionTag,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub attention_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// 32×32 inputs and 8 base channels: small enough to train on one core.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 32,
            in_channels: 1,
            base_channels: 8,
            depth: 3,
            attention_heads: 4,
        }
    }

    /// 128×128 inputs and 64 base channels, the size of the full-scale runs.
    pub fn full() -> Self {
        ModelConfig {
            image_size: 128,
            in_channels: 1,
            base_channels: 64,
            depth: 3,
            attention_heads: 4,
        }
    }

    pub fn validate(&self) -> Result<(), SegnetError> {
        let bad = |m: String| Err(SegnetError::InvalidConfig(m));
        if self.image_size == 0 || self.in_channels == 0 || self.base_channels == 0 || self.attention_heads == 0 {
            return bad(format!("all extents must be positive: {self:?}"));
        }
        if self.depth > 16 || self.image_size % (1 << self.depth) != 0 {
            return bad(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size, self.depth
            ));
        }
        if self.bottleneck_dim() % self.attention_heads != 0 {
            return bad(format!(
                "bottleneck_dim {} not divisible by {} heads",
                self.bottleneck_dim(),
                self.attention_heads
            ));
        }
        Ok(())
    }

    /// Channel count of encoder level `level` (0 is the input block).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_dim(&self) -> usize {
        2 * self.channels(self.depth)
    }

    /// Side length of the bottleneck feature map.
    pub fn bottleneck_side(&self) -> usize {
        self.image_size >> self.depth
    }

    /// Attention tokens contributed by one image.
    pub fn tokens_per_sample(&self) -> usize {
        self.bottleneck_side() * self.bottleneck_side()
    }

    pub fn head_dim(&self) -> usize {
        self.bottleneck_dim() / self.attention_heads
    }
}
