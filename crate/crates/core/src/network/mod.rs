//! The anticipation network: adaptive adjacency, weighted GCN, spatial LSTM,
//! fusion with frame features, causal dilated convolution block and a
//! swappable temporal head.

mod heads;
mod layers;
mod model;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeometryConfig;

pub use heads::{temporal_head, HeadKind};
pub use layers::{
    adaptive_adjacency, dilated_block, dilated_stack, effective_adjacency, fuse, gcn_layer,
    lstm_sequence, spatial_recurrence, LAYER_NORM_EPS,
};
pub use model::{forward, forward_inputs, forward_loss, ClipInputs, LossTarget, Prediction};
pub use params::ModelParams;

/// Component switches; disabling one swaps it for the simpler stand-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Off: classifier applied directly to the dilated block output.
    pub use_gru_head: bool,
    /// Off: the dilated block is the identity.
    pub use_dilated: bool,
    /// Off: graph layers become per-node linear maps.
    pub use_dgcn: bool,
    /// Off: the learned adjacency is replaced by a uniform fully connected one.
    pub use_adaptive_adj: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_gru_head: true,
            use_dilated: true,
            use_dgcn: true,
            use_adaptive_adj: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_objects: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub gcn_layers: usize,
    pub kernel_size: usize,
    /// One entry per dilated layer.
    pub dilations: Vec<usize>,
    pub temporal_head: HeadKind,
    pub ablation: Ablation,
    pub geometry: GeometryConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    /// Full-size configuration (512-d features).
    fn default() -> Self {
        ModelConfig {
            num_objects: crate::data::OBJECT_SLOTS,
            feature_dim: 512,
            hidden_dim: 512,
            gcn_layers: 2,
            kernel_size: 2,
            dilations: vec![1, 2, 4],
            temporal_head: HeadKind::Gru,
            ablation: Ablation::default(),
            geometry: GeometryConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 32-d features and hidden state.
    pub fn desk() -> Self {
        ModelConfig {
            feature_dim: 32,
            hidden_dim: 32,
            ..ModelConfig::default()
        }
    }

    /// Number of input frames visible to one output frame of the dilated block.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .dilations
            .iter()
            .map(|r| r * (self.kernel_size - 1))
            .sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("model config: {m}")));
        if self.num_objects == 0 || self.feature_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.gcn_layers == 0 {
            return bad("gcn_layers must be >= 1");
        }
        if self.kernel_size == 0 || self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("kernel_size and dilations must be positive");
        }
        if !(self.geometry.depth_scale > 0.0) {
            return bad("depth_scale must be positive");
        }
        Ok(())
    }
}
