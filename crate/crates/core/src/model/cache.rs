use crate::tensor::Float;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone)]
pub(crate) struct LayerKv<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
}

/// Per-layer keys (post-RoPE) and values for incremental decoding.
///
/// The cache remembers the RoPE base its keys were rotated with and the tokens that
/// produced them, so a forward pass whose base differs (dynamic NTK crossing a chunk
/// boundary) can re-encode the prefix instead of mixing rotations.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    pub(crate) layers: Vec<LayerKv<T>>,
    pub(crate) tokens: Vec<TokenId>,
    pub(crate) rope_base: Option<f64>,
    pub(crate) reencodes: usize,
    max_len: usize,
    hidden: usize,
}

impl<T: Float> KvCache<T> {
    pub fn new(n_layers: usize, hidden: usize, max_len: usize) -> Self {
        Self {
            layers: vec![
                LayerKv {
                    k: Vec::new(),
                    v: Vec::new()
                };
                n_layers
            ],
            tokens: Vec::new(),
            rope_base: None,
            reencodes: 0,
            max_len,
            hidden,
        }
    }

    /// Positions filled; equal across layers.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Base the cached keys were rotated with.
    pub fn rope_base(&self) -> Option<f64> {
        self.rope_base
    }

    /// How many times the prefix was re-encoded after a RoPE base change.
    pub fn reencode_count(&self) -> usize {
        self.reencodes
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.k.clear();
            l.v.clear();
        }
        self.tokens.clear();
        self.rope_base = None;
    }

    pub(crate) fn check_consistent(&self) {
        debug_assert!(self
            .layers
            .iter()
            .all(|l| l.k.len() == self.len() * self.hidden && l.v.len() == l.k.len()));
    }
}
