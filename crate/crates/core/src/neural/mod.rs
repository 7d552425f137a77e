//! Neural substrate: flat parameter storage, a conditioned MLP with
//! input-gradient contractions, a causal transformer encoder, Adam with a
//! warmup + cosine schedule, and the checkpoint container.
//!
//! Every backward pass is written out by hand.

pub mod checkpoint;
pub mod encoder;
pub mod linalg;
pub mod mlp;
pub mod optim;
pub mod params;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use encoder::{Encoder, EncoderConfig, EncoderTape};
pub use mlp::{silu, time_embedding, CondMlp, CondTape, Linear, Mlp};
pub use optim::{train_step, AdamState, TrainConfig};
pub use params::{LayoutBuilder, ParamStore, TensorInfo};

use serde::{Deserialize, Serialize};

/// Architecture sizes shared by the diffusion models and the mixture baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// latent frame dimension
    pub dim: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_seq: usize,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    pub temb_dim: usize,
    /// mixture components of the baseline head
    pub gmm_components: usize,
    /// lower bound on baseline standard deviations
    pub sigma_floor: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            width: 64,
            heads: 4,
            blocks: 2,
            max_seq: 256,
            mlp_hidden: 128,
            mlp_layers: 3,
            temb_dim: 32,
            gmm_components: 8,
            sigma_floor: 1e-3,
        }
    }
}

impl ArchConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_in: self.dim,
            width: self.width,
            heads: self.heads,
            blocks: self.blocks,
            max_seq: self.max_seq,
        }
    }
}
