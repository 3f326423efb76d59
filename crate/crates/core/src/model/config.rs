use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, Precision};

/// Architecture hyperparameters of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub rms_eps: f64,
    pub precision: Precision,
    pub max_context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 16,
            ffn_dim: 256,
            vocab_size: 256,
            rope_theta: 10_000.0,
            rms_eps: 1e-6,
            precision: Precision::F32,
            max_context: 4096,
        }
    }
}

impl ModelConfig {
    /// Two-layer model used for gradient checks and toy training.
    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            hidden: 16,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 4,
            ffn_dim: 32,
            vocab_size: 24,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_layers == 0 || self.vocab_size == 0 || self.ffn_dim == 0 {
            return fail("layers, vocabulary and ffn width must be positive".into());
        }
        if self.num_kv_heads == 0 || !self.num_query_heads.is_multiple_of(self.num_kv_heads) {
            return fail(format!(
                "query heads ({}) must be a multiple of kv heads ({})",
                self.num_query_heads, self.num_kv_heads
            ));
        }
        if self.hidden != self.num_query_heads * self.head_dim {
            return fail(format!(
                "hidden ({}) must equal query heads x head_dim ({} x {})",
                self.hidden, self.num_query_heads, self.head_dim
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return fail(format!("head_dim must be even, got {}", self.head_dim));
        }
        if !(self.rope_theta > 0.0) || !(self.rms_eps > 0.0) || self.max_context == 0 {
            return fail("rope_theta, rms_eps and max_context must be positive".into());
        }
        Ok(())
    }

    pub fn q_width(&self) -> usize {
        self.num_query_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    /// Bytes of K and V stored per token across all layers.
    pub fn kv_bytes_per_token(&self) -> u64 {
        (2 * self.num_layers * self.kv_width() * self.precision.bytes()) as u64
    }

    /// Attention layout for `branches` query sets concatenated along heads.
    pub fn attention_layout(&self, branches: usize) -> AttentionLayout {
        AttentionLayout {
            query_heads: branches * self.num_query_heads,
            branch_heads: self.num_query_heads,
            kv_heads: self.num_kv_heads,
            head_dim: self.head_dim,
        }
    }
}
