use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual layout of a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockStyle {
    /// `h = x + attn(norm(x)); out = h + mlp(norm(h))`
    Sequential,
    /// `n = norm(x); out = x + attn(n) + mlp(n)`
    Parallel,
}

/// Hyperparameters of a decoder-only model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Sliding attention window. `None` means full causal attention.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    #[serde(default = "default_block_style")]
    pub block_style: BlockStyle,
    #[serde(default)]
    pub seed: u64,
}

fn default_rope_base() -> f32 {
    10_000.0
}

fn default_norm_eps() -> f32 {
    1e-5
}

fn default_block_style() -> BlockStyle {
    BlockStyle::Sequential
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 64,
            vocab_size: crate::model::tokenizer::VOCAB_SIZE,
            window: None,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
            block_style: default_block_style(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the concatenated key (or value) heads.
    pub fn d_kv(&self) -> usize {
        self.n_kv_heads * self.d_head()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return fail("d_model, n_layers, d_ff and vocab_size must be positive".into());
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.n_kv_heads > self.n_heads {
            return fail(format!(
                "need 1 <= n_kv_heads <= n_heads, got {} and {}",
                self.n_kv_heads, self.n_heads
            ));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_head().is_multiple_of(2) {
            return fail(format!(
                "d_head {} must be even for rotary embeddings",
                self.d_head()
            ));
        }
        if self.window == Some(0) {
            return fail("window must be at least 1".into());
        }
        if self.rope_base.is_nan()
            || self.rope_base <= 0.0
            || self.norm_eps.is_nan()
            || self.norm_eps < 0.0
        {
            return fail("rope_base must be positive and norm_eps non-negative".into());
        }
        Ok(())
    }
}
