//! Desk-scale decoder-only transformer engine.
//!
//! - [`tokenizer`]: byte-level BPE with digit splitting and rank-file IO
//! - [`model`]: the decoder, KV cache and checkpoint format
//! - [`extension`]: NTK-aware RoPE scaling, LogN scaling and layer-wise windows
//! - [`training`]: document packing, masked cross-entropy, AdamW, schedules
//! - [`chatml`]: conversation rendering with loss masks
//! - [`eval`]: perplexity sweeps and sampling

pub mod chatml;
pub mod eval;
pub mod extension;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use extension::{configure_inference, ExtensionConfig, InferencePlan, NtkMode, WindowSchedule};
pub use model::{KvCache, Model, ModelConfig, Precision, Weights};
pub use tensor::{Float, Tensor};
pub use tokenizer::{TokenId, TokenStream, Vocabulary};
pub use training::{TrainConfig, TrainError};
