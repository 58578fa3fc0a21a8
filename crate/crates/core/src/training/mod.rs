//! Pretraining and supervised fine-tuning: document packing, masked next-token
//! loss, manual backprop, AdamW with warmup plus cosine decay.

mod backprop;
mod loss;
mod optim;
mod packing;
mod schedule;
mod trainer;

pub use loss::{masked_cross_entropy, token_nll};
pub use optim::{clip_grad_norm, AdamW};
pub use packing::{pack_documents, PackedRows};
pub use schedule::lr_at;
pub use trainer::{loss_and_gradients, pretraining_batches, run_training, shuffled_batches, train_step, StepMetrics};

use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::tokenizer::TokenId;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Optimizer, schedule and batching settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Learning-rate floor as a fraction of the peak.
    pub min_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub batch_size: usize,
    /// Tokens per training row (inputs; targets are shifted by one).
    pub context: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 100,
            total_steps: 1000,
            min_lr_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            batch_size: 8,
            context: 256,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Domain(m.to_string()));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return bad("need 0 <= warmup_steps <= total_steps and total_steps > 0");
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return bad("min_lr_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.context < 1 {
            return bad("batch_size and context must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One training sequence: `targets[t]` is the token after `inputs[t]`, and only
/// positions with `loss_mask[t] == 1` contribute to the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub loss_mask: Vec<u8>,
}

impl Example {
    /// Shifts a packed row: every next-token prediction counts.
    pub fn from_row(row: &[TokenId]) -> Self {
        Self::from_masked(row, &vec![1; row.len()])
    }

    /// Shifts a token stream whose mask marks which tokens are loss targets.
    pub fn from_masked(ids: &[TokenId], mask: &[u8]) -> Self {
        assert_eq!(ids.len(), mask.len(), "ids and mask lengths differ");
        assert!(ids.len() >= 2, "need at least two tokens");
        Self {
            inputs: ids[..ids.len() - 1].to_vec(),
            targets: ids[1..].to_vec(),
            loss_mask: mask[1..].to_vec(),
        }
    }

    pub fn masked_tokens(&self) -> usize {
        self.loss_mask.iter().map(|&m| m as usize).sum()
    }
}

pub type Batch = Vec<Example>;
