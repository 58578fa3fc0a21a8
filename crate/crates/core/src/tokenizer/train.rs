use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};

use super::{pretokenize, Result, TokenId, TokenizerError, Vocabulary};

type Pair = (TokenId, TokenId);

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    key: Reverse<(Vec<u8>, Vec<u8>)>,
    pair: Pair,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| self.key.cmp(&other.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Trainer {
    tokens: Vec<Vec<u8>>,
    words: Vec<(Vec<TokenId>, u64)>,
    counts: HashMap<Pair, u64>,
    occurs: HashMap<Pair, HashSet<usize>>,
    heap: BinaryHeap<Candidate>,
}

impl Trainer {
    fn candidate(&self, pair: Pair, count: u64) -> Candidate {
        Candidate {
            count,
            key: Reverse((
                self.tokens[pair.0 as usize].clone(),
                self.tokens[pair.1 as usize].clone(),
            )),
            pair,
        }
    }

    fn add_word_pairs(&mut self, w: usize, sign: i64, touched: &mut HashSet<Pair>) {
        let (ids, freq) = &self.words[w];
        for p in ids.windows(2) {
            let pair = (p[0], p[1]);
            let c = self.counts.entry(pair).or_insert(0);
            *c = (*c as i64 + sign * *freq as i64) as u64;
            if sign > 0 {
                self.occurs.entry(pair).or_default().insert(w);
            }
            touched.insert(pair);
        }
    }

    /// Pops the highest-count pair (ties: lexicographically smallest bytes) that still
    /// occurs at least twice.
    fn next_pair(&mut self) -> Option<Pair> {
        while let Some(c) = self.heap.pop() {
            if self.counts.get(&c.pair) == Some(&c.count) {
                return (c.count >= 2).then_some(c.pair);
            }
        }
        None
    }

    fn apply(&mut self, pair: Pair, new_id: TokenId) {
        let affected: Vec<usize> = {
            let mut v: Vec<usize> = self.occurs.remove(&pair).unwrap_or_default().into_iter().collect();
            v.sort_unstable();
            v
        };
        let mut touched = HashSet::new();
        for w in affected {
            self.add_word_pairs(w, -1, &mut touched);
            let ids = &mut self.words[w].0;
            let mut merged = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(ids[i]);
                    i += 1;
                }
            }
            *ids = merged;
            self.add_word_pairs(w, 1, &mut touched);
        }
        let mut touched: Vec<Pair> = touched.into_iter().collect();
        touched.sort_unstable();
        for p in touched {
            let c = self.counts[&p];
            if c == 0 {
                self.counts.remove(&p);
                self.occurs.remove(&p);
            } else {
                let cand = self.candidate(p, c);
                self.heap.push(cand);
            }
        }
    }
}

/// Greedy most-frequent-pair BPE training over pre-tokenized chunks.
///
/// Stops when the vocabulary holds `target_size` ordinary tokens or no pair occurs
/// more than once. Deterministic for a given multiset of chunks.
pub fn train_vocabulary<'a>(
    corpus: impl IntoIterator<Item = &'a [u8]>,
    target_size: usize,
    specials: &[&str],
) -> Result<Vocabulary> {
    if target_size < 256 {
        return Err(TokenizerError::Domain(format!(
            "target vocabulary size {target_size} is below the 256 byte tokens"
        )));
    }
    let mut freq: HashMap<&[u8], u64> = HashMap::new();
    for doc in corpus {
        for chunk in pretokenize(doc) {
            *freq.entry(chunk).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(Vec<TokenId>, u64)> = freq
        .into_iter()
        .filter(|(c, _)| c.len() > 1)
        .map(|(c, n)| (c.iter().map(|&b| b as TokenId).collect(), n))
        .collect();
    words.sort_unstable();

    let mut t = Trainer {
        tokens: (0..=255u8).map(|b| vec![b]).collect(),
        words,
        counts: HashMap::new(),
        occurs: HashMap::new(),
        heap: BinaryHeap::new(),
    };
    let mut touched = HashSet::new();
    for w in 0..t.words.len() {
        t.add_word_pairs(w, 1, &mut touched);
    }
    let mut init: Vec<Pair> = t.counts.keys().copied().collect();
    init.sort_unstable();
    for p in init {
        let cand = t.candidate(p, t.counts[&p]);
        t.heap.push(cand);
    }

    let mut index: HashMap<Vec<u8>, TokenId> = t
        .tokens
        .iter()
        .enumerate()
        .map(|(i, b)| (b.clone(), i as TokenId))
        .collect();
    while t.tokens.len() < target_size {
        let Some(pair) = t.next_pair() else { break };
        let mut bytes = t.tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&t.tokens[pair.1 as usize]);
        let id = match index.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = t.tokens.len() as TokenId;
                index.insert(bytes.clone(), id);
                t.tokens.push(bytes);
                id
            }
        };
        t.apply(pair, id);
    }
    Vocabulary::from_tokens(t.tokens, specials)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_merge_from_aaaa() {
        let v = train_vocabulary([&b"aaaa"[..]], 257, &[]).unwrap();
        assert_eq!(v.base_vocab_size(), 257);
        assert_eq!(v.token_bytes(256), Some(&b"aa"[..]));
    }

    #[test]
    fn target_256_is_byte_level() {
        let v = train_vocabulary([&b"hello hello"[..]], 256, &[]).unwrap();
        assert_eq!(v, Vocabulary::byte_level(&[]));
    }

    #[test]
    fn target_below_256_rejected() {
        assert!(matches!(
            train_vocabulary([&b"x"[..]], 255, &[]),
            Err(TokenizerError::Domain(_))
        ));
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let v = train_vocabulary([&b"abcdef"[..]], 1000, &[]).unwrap();
        assert_eq!(v.base_vocab_size(), 256);
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" each occur twice; "ab" < "cd".
        let v = train_vocabulary([&b"cd\nab\ncd\nab"[..]], 257, &[]).unwrap();
        assert_eq!(v.token_bytes(256), Some(&b"ab"[..]));
    }

    #[test]
    fn frequency_beats_order() {
        let v = train_vocabulary([&b"xy zw zw zw xy"[..]], 258, &[]).unwrap();
        // " zw" chunks: pair (" ", "z") and ("z","w") both occur 3 times; " z" < "zw".
        assert_eq!(v.token_bytes(256), Some(&b" z"[..]));
        assert_eq!(v.token_bytes(257), Some(&b" zw"[..]));
    }
}
