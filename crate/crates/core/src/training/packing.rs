use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tokenizer::TokenId;

/// Shuffles documents (unless `seed` is `None`), joins them with an end-of-document
/// token after each, and cuts the stream into `context`-token rows. The trailing
/// partial row is dropped.
pub fn pack_documents(
    docs: impl IntoIterator<Item = Vec<TokenId>>,
    context: usize,
    eod: TokenId,
    seed: Option<u64>,
) -> PackedRows {
    assert!(context >= 2, "context must be at least 2 tokens");
    let mut docs: Vec<Vec<TokenId>> = docs.into_iter().collect();
    if let Some(seed) = seed {
        docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut stream = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for d in docs {
        stream.extend(d);
        stream.push(eod);
    }
    let full = stream.len() / context * context;
    stream.truncate(full);
    PackedRows {
        stream,
        context,
        pos: 0,
    }
}

/// Iterator over packed rows.
#[derive(Debug, Clone)]
pub struct PackedRows {
    stream: Vec<TokenId>,
    context: usize,
    pos: usize,
}

impl PackedRows {
    pub fn row_count(&self) -> usize {
        self.stream.len() / self.context
    }
}

impl Iterator for PackedRows {
    type Item = Vec<TokenId>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos + self.context > self.stream.len() {
            return None;
        }
        let row = self.stream[self.pos..self.pos + self.context].to_vec();
        self.pos += self.context;
        Some(row)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.stream.len() - self.pos) / self.context;
        (n, Some(n))
    }
}

impl ExactSizeIterator for PackedRows {}
