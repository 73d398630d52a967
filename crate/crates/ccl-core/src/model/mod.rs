//! Encoder-decoder grounding network with manual backpropagation.
//!
//! A pre-norm transformer encoder contextualizes clip features; a decoder
//! turns sentence queries into intervals through cosine-similarity
//! cross-attention. Everything is f64 and hand-differentiated so gradients
//! can be checked against finite differences.

pub mod adam;
pub mod backward;
pub mod checkpoint;
pub mod forward;
pub mod losses;
pub mod params;

pub use adam::{adam_step, AdamState};
pub use backward::{forward_backward, forward_backward_with_indices};
pub use forward::{forward, forward_with_indices, moment_pool, ForwardOutput};
pub use losses::{attention_loss, contrastive_consistency_loss, LossSpec, LossValues};
pub use params::{init_params, GradMap, ModelParams};

use serde::{Deserialize, Serialize};

/// Hyperparameters that fix every parameter shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub attn_scale_init: f64,
    pub d_v: usize,
    pub d_q: usize,
    pub max_queries: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            enc_layers: 3,
            dec_layers: 3,
            heads: 4,
            ffn_dim: 64,
            attn_scale_init: 10.0,
            d_v: 32,
            d_q: 32,
            max_queries: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(crate::CclError::InvalidConfig(format!(
                "hidden size {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ffn_dim == 0 {
            return Err(crate::CclError::InvalidConfig(
                "layer counts and ffn_dim must be positive".into(),
            ));
        }
        if self.max_queries == 0 {
            return Err(crate::CclError::InvalidConfig(
                "max_queries must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}
