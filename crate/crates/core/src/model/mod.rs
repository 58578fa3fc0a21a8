//! Decoder-only transformer: untied embeddings, pre-norm RMSNorm, attention with
//! biases on Q/K/V only, SwiGLU feed-forward, rotary positions from an f64
//! inverse-frequency table, and a KV cache for incremental decoding.

mod attention;
mod cache;
pub mod checkpoint;
mod config;
mod forward;
pub mod kernels;
mod rope;
mod weights;

pub use attention::{attention, AttentionMask, MASK_NEG};
pub use cache::KvCache;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::{default_ffn_hidden, ModelConfig, Precision};
pub use forward::Model;
pub(crate) use forward::{Dropout, Tape};
pub use kernels::{rmsnorm, swiglu_ffn};
pub use rope::{apply_rope, build_rope_table, RopeAngles, RopeTable};
pub use weights::{LayerWeights, ParamKind, Weights};

use crate::extension::ExtensionError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("weights do not match config: {0}")]
    Shape(String),
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Extension(#[from] ExtensionError),
}
