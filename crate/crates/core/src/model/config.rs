use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Fp32,
    Fp64,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

/// Architectural hyperparameters. `ffn_hidden` of 0 in a config file means "derive it".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    #[serde(default)]
    pub ffn_hidden: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub train_context: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

/// 8/3 of `hidden`, rounded up to a multiple of 8.
pub fn default_ffn_hidden(hidden: usize) -> usize {
    let raw = (8 * hidden).div_ceil(3);
    raw.div_ceil(8) * 8
}

impl ModelConfig {
    pub fn new(vocab_size: usize, hidden: usize, n_heads: usize, n_layers: usize, train_context: usize) -> Self {
        Self {
            vocab_size,
            hidden,
            n_heads,
            n_layers,
            ffn_hidden: default_ffn_hidden(hidden),
            rope_base: default_rope_base(),
            train_context,
            tie_embeddings: false,
            precision: Precision::Fp32,
            norm_eps: default_norm_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Fills derived fields and checks invariants.
    pub fn validated(mut self) -> Result<Self, ModelError> {
        if self.ffn_hidden == 0 {
            self.ffn_hidden = default_ffn_hidden(self.hidden);
        }
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.vocab_size == 0 || self.hidden == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("vocab_size, hidden, n_heads and n_layers must be positive".into());
        }
        if self.hidden % self.n_heads != 0 {
            return bad(format!(
                "hidden {} not divisible by n_heads {}",
                self.hidden, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} must be even for rotary pairs", self.head_dim()));
        }
        if self.train_context == 0 {
            return bad("train_context must be at least 1".into());
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return bad(format!("rope_base {} must be positive", self.rope_base));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return bad("norm_eps must be positive".into());
        }
        Ok(self)
    }

    /// Parameter count including both embedding matrices.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden;
        let per_layer = 2 * h + 3 * (h * h + h) + h * h + 3 * h * self.ffn_hidden;
        let out = if self.tie_embeddings { 0 } else { h * self.vocab_size };
        self.vocab_size * h + out + self.n_layers * per_layer + h
    }
}
