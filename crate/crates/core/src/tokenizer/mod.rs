//! Byte-level BPE tokenizer.
//!
//! A [`Vocabulary`] is a dense rank table over byte sequences plus a registry of special
//! tokens. Encoding pre-tokenizes (digits always split into singletons), then runs the
//! lowest-rank-first merge loop inside each chunk.

mod pretokenize;
mod train;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;

pub use pretokenize::pretokenize;
pub use train::train_vocabulary;

pub type TokenId = u32;

pub const ENDOFTEXT: &str = "<|endoftext|>";
pub const IM_START: &str = "<|im_start|>";
pub const IM_END: &str = "<|im_end|>";

/// Special tokens registered by default, in id order.
pub const DEFAULT_SPECIALS: [&str; 3] = [ENDOFTEXT, IM_START, IM_END];

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("rank file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("vocabulary integrity: {0}")]
    Integrity(String),
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

/// Token ids produced by [`Vocabulary::encode`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<TokenId>,
    pub byte_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ranks: HashMap<Vec<u8>, TokenId>,
    tokens: Vec<Vec<u8>>,
    specials: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens listed in rank order.
    pub fn from_tokens(tokens: Vec<Vec<u8>>, specials: &[&str]) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(tokens.len());
        for (rank, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(TokenizerError::Integrity(format!("rank {rank} is an empty token")));
            }
            if ranks.insert(tok.clone(), rank as TokenId).is_some() {
                return Err(TokenizerError::Integrity(format!(
                    "token {} appears twice",
                    B64.encode(tok)
                )));
            }
        }
        if let Some(b) = (0..=255u8).find(|b| !ranks.contains_key(&[*b][..])) {
            return Err(TokenizerError::Integrity(format!("single byte 0x{b:02x} missing")));
        }
        let mut seen = Vec::new();
        for s in specials {
            if s.is_empty() {
                return Err(TokenizerError::Integrity("empty special token".into()));
            }
            if seen.contains(s) {
                return Err(TokenizerError::Integrity(format!("special {s} registered twice")));
            }
            seen.push(*s);
        }
        Ok(Self {
            ranks,
            tokens,
            specials: specials.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// The 256 single-byte tokens, rank equal to byte value.
    pub fn byte_level(specials: &[&str]) -> Self {
        Self::from_tokens((0..=255u8).map(|b| vec![b]).collect(), specials).expect("byte-level vocabulary is valid")
    }

    /// Parses a rank file: one `<base64 token bytes> <decimal rank>` per line.
    pub fn load(reader: impl BufRead, specials: &[&str]) -> Result<Self> {
        let mut entries: Vec<Option<Vec<u8>>> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: &str| TokenizerError::Parse {
                line: line_no,
                msg: msg.to_string(),
            };
            let (tok, rank) = line
                .split_once(' ')
                .ok_or_else(|| parse_err("expected `<base64> <rank>`"))?;
            let bytes = B64.decode(tok).map_err(|e| parse_err(&format!("bad base64: {e}")))?;
            let rank: usize = rank
                .trim()
                .parse()
                .map_err(|_| parse_err(&format!("bad rank `{rank}`")))?;
            if rank >= entries.len() {
                entries.resize(rank + 1, None);
            }
            if entries[rank].is_some() {
                return Err(TokenizerError::Integrity(format!(
                    "rank {rank} appears twice (line {line_no})"
                )));
            }
            entries[rank] = Some(bytes);
        }
        let tokens = entries
            .into_iter()
            .enumerate()
            .map(|(rank, t)| t.ok_or_else(|| TokenizerError::Integrity(format!("rank {rank} missing"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(tokens, specials)
    }

    pub fn load_file(path: impl AsRef<Path>, specials: &[&str]) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(file), specials)
    }

    /// Serializes the rank table (specials are not part of the rank file).
    pub fn to_rank_file(&self) -> String {
        let mut out = String::new();
        for (rank, tok) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{} {rank}", B64.encode(tok));
        }
        out
    }

    pub fn save_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_rank_file())?;
        Ok(())
    }

    /// Returns a copy with a different special-token registry.
    pub fn with_specials(&self, specials: &[&str]) -> Result<Self> {
        Self::from_tokens(self.tokens.clone(), specials)
    }

    /// Count of non-special tokens.
    pub fn base_vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Total id space including specials.
    pub fn size(&self) -> usize {
        self.tokens.len() + self.specials.len()
    }

    pub fn special_id(&self, text: &str) -> Option<TokenId> {
        self.specials
            .iter()
            .position(|s| s == text)
            .map(|i| (self.tokens.len() + i) as TokenId)
    }

    pub fn specials(&self) -> impl Iterator<Item = (&str, TokenId)> {
        let base = self.tokens.len();
        self.specials
            .iter()
            .enumerate()
            .map(move |(i, s)| (s.as_str(), (base + i) as TokenId))
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) >= self.tokens.len() && (id as usize) < self.size()
    }

    pub fn rank(&self, bytes: &[u8]) -> Option<TokenId> {
        self.ranks.get(bytes).copied()
    }

    /// Bytes of an ordinary token (None for specials and unknown ids).
    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Encodes UTF-8 text.
    pub fn encode(&self, text: &str, allow_specials: bool) -> TokenStream {
        self.encode_bytes(text.as_bytes(), allow_specials)
    }

    /// Encodes an arbitrary byte string. With `allow_specials`, exact special-token
    /// substrings map to their single ids; otherwise they are ordinary bytes.
    pub fn encode_bytes(&self, text: &[u8], allow_specials: bool) -> TokenStream {
        let mut ids = Vec::with_capacity(text.len() / 2);
        let mut rest = text;
        while !rest.is_empty() {
            let hit = if allow_specials { self.find_special(rest) } else { None };
            let (plain, special) = match hit {
                Some((pos, idx)) => (&rest[..pos], Some(idx)),
                None => (rest, None),
            };
            for chunk in pretokenize(plain) {
                self.merge_chunk(chunk, &mut ids);
            }
            match special {
                Some(idx) => {
                    ids.push((self.tokens.len() + idx) as TokenId);
                    rest = &rest[plain.len() + self.specials[idx].len()..];
                }
                None => break,
            }
        }
        TokenStream {
            ids,
            byte_len: text.len(),
        }
    }

    /// Leftmost special occurrence; longest wins on ties.
    fn find_special(&self, text: &[u8]) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize)> = None;
        for (idx, s) in self.specials.iter().enumerate() {
            let s = s.as_bytes();
            if let Some(pos) = text.windows(s.len()).position(|w| w == s) {
                let better = match best {
                    None => true,
                    Some((bp, bi)) => pos < bp || (pos == bp && s.len() > self.specials[bi].len()),
                };
                if better {
                    best = Some((pos, idx));
                }
            }
        }
        best
    }

    /// Lowest-rank-first pair merging within one chunk.
    fn merge_chunk(&self, chunk: &[u8], out: &mut Vec<TokenId>) {
        // Part boundaries: parts[i]..parts[i+1] is one current token.
        let mut parts: Vec<usize> = (0..=chunk.len()).collect();
        loop {
            let mut best: Option<(TokenId, usize)> = None;
            for i in 0..parts.len().saturating_sub(2) {
                if let Some(r) = self.rank(&chunk[parts[i]..parts[i + 2]]) {
                    if best.is_none_or(|(br, _)| r < br) {
                        best = Some((r, i));
                    }
                }
            }
            match best {
                Some((_, i)) => {
                    parts.remove(i + 1);
                }
                None => break,
            }
        }
        out.extend(parts.windows(2).map(|w| self.ranks[&chunk[w[0]..w[1]]]));
    }

    /// Concatenates token bytes; specials decode to their registered text.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len() * 3);
        for &id in ids {
            let idx = id as usize;
            if let Some(t) = self.tokens.get(idx) {
                out.extend_from_slice(t);
            } else if let Some(s) = self.specials.get(idx - self.tokens.len()) {
                out.extend_from_slice(s.as_bytes());
            } else {
                return Err(TokenizerError::Domain(format!("unknown token id {id}")));
            }
        }
        Ok(out)
    }

    pub fn decode_lossy(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }
}

/// Baseline token count over this vocabulary's token count on the same corpus.
/// Values above 1 mean `v` compresses better than `baseline`.
pub fn compression_rate<'a>(
    v: &Vocabulary,
    corpus: impl IntoIterator<Item = &'a [u8]>,
    baseline: &Vocabulary,
) -> Result<f64> {
    let (mut ours, mut theirs, mut docs) = (0usize, 0usize, 0usize);
    for doc in corpus {
        ours += v.encode_bytes(doc, false).ids.len();
        theirs += baseline.encode_bytes(doc, false).ids.len();
        docs += 1;
    }
    if docs == 0 {
        return Err(TokenizerError::Domain(
            "compression rate needs a nonempty corpus".into(),
        ));
    }
    if ours == 0 {
        return Ok(1.0);
    }
    Ok(theirs as f64 / ours as f64)
}
