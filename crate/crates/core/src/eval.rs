//! Perplexity-versus-length sweeps, token generation, and the per-language
//! compression benchmark.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::extension::ExtensionConfig;
use crate::model::{Model, ModelError};
use crate::tensor::Float;
use crate::tokenizer::{compression_rate, TokenId, TokenizerError, Vocabulary};
use crate::training::token_nll;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perplexity {
    pub perplexity: f64,
    pub mean_nll: f64,
    /// Next-token predictions scored.
    pub predictions: usize,
    pub sequences: usize,
    /// Sequences shorter than the evaluation length.
    pub skipped: usize,
}

/// Scores the first `eval_len` tokens of every sequence that is long enough, with one
/// full forward pass each. Perplexity is `exp` of the mean NLL over positions
/// `1..eval_len` pooled across sequences.
pub fn perplexity<T: Float>(
    model: &Model<T>,
    ext: &ExtensionConfig,
    corpus: &[Vec<TokenId>],
    eval_len: usize,
) -> Result<Perplexity, EvalError> {
    if eval_len < 2 {
        return Err(EvalError::Domain("eval_len must be at least 2".into()));
    }
    let usable: Vec<&[TokenId]> = corpus
        .iter()
        .filter(|s| s.len() >= eval_len)
        .map(|s| &s[..eval_len])
        .collect();
    let skipped = corpus.len() - usable.len();
    if usable.is_empty() {
        return Err(EvalError::Domain(format!(
            "no sequence has {eval_len} tokens ({skipped} skipped)"
        )));
    }
    let sums: Vec<Result<f64, ModelError>> = usable
        .par_iter()
        .map(|ids| {
            let logits = model.forward(ids, ext, None)?;
            let nll = token_nll(&logits, &ids[1..]);
            Ok(nll.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).sum())
        })
        .collect();
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    let predictions = usable.len() * (eval_len - 1);
    let mean_nll = total / predictions as f64;
    Ok(Perplexity {
        perplexity: mean_nll.exp(),
        mean_nll,
        predictions,
        sequences: usable.len(),
        skipped,
    })
}

/// Cuts each token stream into consecutive non-overlapping `len`-token pieces.
pub fn split_sequences(streams: &[Vec<TokenId>], len: usize, max_sequences: Option<usize>) -> Vec<Vec<TokenId>> {
    streams
        .iter()
        .flat_map(|s| s.chunks_exact(len).map(<[TokenId]>::to_vec))
        .take(max_sequences.unwrap_or(usize::MAX))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PplRow {
    pub length: usize,
    pub label: String,
    pub perplexity: f64,
    pub sequences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PplReport {
    pub corpus_id: String,
    pub model_id: String,
    pub rows: Vec<PplRow>,
}

impl PplReport {
    pub fn get(&self, label: &str, length: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.label == label && r.length == length)
            .map(|r| r.perplexity)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("corpus,model,technique,length,sequences,perplexity\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6}",
                self.corpus_id, self.model_id, r.label, r.length, r.sequences, r.perplexity
            );
        }
        s
    }

    /// A technique × length table followed by a log-scale bar per cell.
    pub fn render_text(&self) -> String {
        let mut labels: Vec<&str> = Vec::new();
        let mut lengths: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !labels.contains(&r.label.as_str()) {
                labels.push(&r.label);
            }
            if !lengths.contains(&r.length) {
                lengths.push(r.length);
            }
        }
        let width = labels.iter().map(|l| l.len()).max().unwrap_or(0).max(9);
        let mut s = format!("perplexity on {} ({})\n", self.corpus_id, self.model_id);
        let _ = write!(s, "{:width$}", "technique");
        for l in &lengths {
            let _ = write!(s, " {l:>10}");
        }
        s.push('\n');
        for label in &labels {
            let _ = write!(s, "{label:width$}");
            for &l in &lengths {
                match self.get(label, l) {
                    Some(p) => {
                        let _ = write!(s, " {p:>10.3}");
                    }
                    None => {
                        let _ = write!(s, " {:>10}", "-");
                    }
                }
            }
            s.push('\n');
        }
        let max = self.rows.iter().map(|r| r.perplexity.ln()).fold(1.0, f64::max);
        s.push('\n');
        for r in &self.rows {
            let bar = ((r.perplexity.ln().max(0.0) / max) * 50.0).round() as usize;
            let _ = writeln!(s, "{:width$} {:>6} |{}", r.label, r.length, "#".repeat(bar.max(1)));
        }
        s
    }
}

/// Evaluates every technique set at every length. Each length splits `streams` into
/// pieces of that length (at most `max_sequences` of them).
pub fn length_sweep<T: Float>(
    model: &Model<T>,
    techniques: &[ExtensionConfig],
    lengths: &[usize],
    streams: &[Vec<TokenId>],
    max_sequences: Option<usize>,
    ids: (&str, &str),
) -> Result<PplReport, EvalError> {
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Domain("lengths must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(techniques.len() * lengths.len());
    for ext in techniques {
        ext.validate(model.cfg.n_layers).map_err(ModelError::from)?;
        for &len in lengths {
            let seqs = split_sequences(streams, len, max_sequences);
            let p = perplexity(model, ext, &seqs, len)?;
            rows.push(PplRow {
                length: len,
                label: ext.label(),
                perplexity: p.perplexity,
                sequences: p.sequences,
            });
        }
    }
    Ok(PplReport {
        corpus_id: ids.0.to_string(),
        model_id: ids.1.to_string(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingPolicy {
    Greedy,
    /// Nucleus sampling over the smallest high-probability prefix with mass ≥ `p`.
    TopP {
        p: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// New tokens, excluding any stop token.
    pub tokens: Vec<TokenId>,
    /// The stop token that ended generation, if any.
    pub stopped_by: Option<TokenId>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// The nucleus of a distribution: tokens in descending probability (ties by id) until
/// the cumulative mass reaches `p`, renormalized.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<(TokenId, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    kept.into_iter().map(|i| (i as TokenId, probs[i] / mass)).collect()
}

fn softmax_f64<T: Float>(logits: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = logits.iter().map(|x| x.to_f64().unwrap_or(f64::NEG_INFINITY)).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Autoregressive decoding with a KV cache.
pub fn generate<T: Float>(
    model: &Model<T>,
    ext: &ExtensionConfig,
    prompt: &[TokenId],
    policy: SamplingPolicy,
    max_new: usize,
    stop: &[TokenId],
) -> Result<Generation, EvalError> {
    if prompt.is_empty() {
        return Err(EvalError::Domain("prompt must contain at least one token".into()));
    }
    if let SamplingPolicy::TopP { p, .. } = policy {
        if !(p > 0.0 && p <= 1.0) {
            return Err(EvalError::Domain(format!("top-p {p} outside (0, 1]")));
        }
    }
    let mut rng = match policy {
        SamplingPolicy::TopP { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        SamplingPolicy::Greedy => None,
    };
    let mut cache = model.new_cache(prompt.len() + max_new);
    let mut logits = model.forward(prompt, ext, Some(&mut cache))?;
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let last = logits.row(logits.rows() - 1);
        let probs = softmax_f64(last);
        let next = match (policy, rng.as_mut()) {
            (SamplingPolicy::TopP { p, .. }, Some(rng)) => {
                let nuc = nucleus(&probs, p);
                let r: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = nuc[nuc.len() - 1].0;
                for &(id, q) in &nuc {
                    acc += q;
                    if r < acc {
                        pick = id;
                        break;
                    }
                }
                pick
            }
            _ => argmax(&probs) as TokenId,
        };
        if stop.contains(&next) {
            return Ok(Generation {
                tokens: out,
                stopped_by: Some(next),
            });
        }
        out.push(next);
        if out.len() == max_new {
            break;
        }
        logits = model.forward(&[next], ext, Some(&mut cache))?;
    }
    Ok(Generation {
        tokens: out,
        stopped_by: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionRow {
    pub language: String,
    pub documents: usize,
    /// Baseline tokens divided by our tokens.
    pub rate: f64,
}

/// Compression rate of `ours` against `baseline` for each labelled document set.
pub fn compression_benchmark(
    ours: &Vocabulary,
    baseline: &Vocabulary,
    sets: &[(String, Vec<Vec<u8>>)],
) -> Result<Vec<CompressionRow>, EvalError> {
    sets.iter()
        .map(|(lang, docs)| {
            let rate = compression_rate(ours, docs.iter().map(Vec::as_slice), baseline)?;
            Ok(CompressionRow {
                language: lang.clone(),
                documents: docs.len(),
                rate,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Weights};
    use crate::training::masked_cross_entropy;
    use proptest::prelude::*;

    fn random_model(seed: u64) -> Model<f64> {
        let cfg = ModelConfig::new(29, 16, 2, 2, 16);
        let mut m = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        m.weights.tensors_mut().into_iter().for_each(|t| t.scale(5.0));
        m
    }

    fn corpus(n: usize, len: usize) -> Vec<Vec<TokenId>> {
        (0..n)
            .map(|s| (0..len).map(|i| ((i * 7 + s * 3 + i * i) % 29) as TokenId).collect())
            .collect()
    }

    #[test]
    fn zero_weights_give_vocab_perplexity() {
        let cfg = ModelConfig::new(29, 16, 2, 2, 16).validated().unwrap();
        let m = Model::new(cfg.clone(), Weights::<f64>::zeros(&cfg)).unwrap();
        let p = perplexity(&m, &ExtensionConfig::off(), &corpus(3, 12), 10).unwrap();
        assert!((p.perplexity - 29.0).abs() < 1e-9);
        assert_eq!(p.predictions, 27);
    }

    #[test]
    fn matches_training_loss() {
        let m = random_model(1);
        let c = corpus(4, 20);
        let p = perplexity(&m, &ExtensionConfig::off(), &c, 20).unwrap();
        let mut sum = 0.0;
        for s in &c {
            let logits = m.forward_vanilla(&s[..19]).unwrap();
            sum += masked_cross_entropy(&logits, &s[1..], &[1; 19]).unwrap().0;
        }
        assert!((p.perplexity - (sum / 4.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn short_sequences_skipped() {
        let m = random_model(2);
        let mut c = corpus(2, 10);
        c.push(vec![1, 2, 3]);
        let p = perplexity(&m, &ExtensionConfig::off(), &c, 10).unwrap();
        assert_eq!((p.sequences, p.skipped), (2, 1));
        assert!(perplexity(&m, &ExtensionConfig::off(), &c[2..], 10).is_err());
    }

    #[test]
    fn adding_sequences_pools_the_mean() {
        let m = random_model(3);
        let c = corpus(5, 12);
        let ext = ExtensionConfig::off();
        let a = perplexity(&m, &ext, &c[..2], 12).unwrap();
        let b = perplexity(&m, &ext, &c[2..], 12).unwrap();
        let all = perplexity(&m, &ext, &c, 12).unwrap();
        let pooled = (a.mean_nll * 2.0 + b.mean_nll * 3.0) / 5.0;
        assert!((all.mean_nll - pooled).abs() < 1e-12);
    }

    #[test]
    fn sweep_grid_shape_and_csv() {
        let m = random_model(4);
        let stream = vec![corpus(1, 200).remove(0)];
        let techs = [
            ExtensionConfig::off(),
            ExtensionConfig::from_label("ntk+logn+window", 16).unwrap(),
        ];
        let r = length_sweep(&m, &techs, &[8, 16, 32], &stream, Some(3), ("toy", "m")).unwrap();
        assert_eq!(r.rows.len(), 6);
        assert_eq!(r.to_csv().lines().count(), 7);
        assert!(r.render_text().contains("ntk+logn+window"));
        assert!(length_sweep(&m, &techs, &[16, 8], &stream, None, ("t", "m")).is_err());
    }

    /// Three-token model where token t's embedding points the output at (t + 1) % 3.
    fn rigged() -> Model<f64> {
        let mut cfg = ModelConfig::new(3, 4, 1, 1, 8);
        cfg.tie_embeddings = false;
        let cfg = cfg.validated().unwrap();
        let mut w = Weights::<f64>::zeros(&cfg);
        w.final_norm.fill(1.0);
        w.layers[0].attn_norm.fill(1.0);
        w.layers[0].ffn_norm.fill(1.0);
        for t in 0..3 {
            w.embedding.row_mut(t)[t] = 1.0;
        }
        let out = w.output.as_mut().unwrap();
        for t in 0..3 {
            out.data_mut()[t * 3 + (t + 1) % 3] = 10.0;
        }
        Model::new(cfg, w).unwrap()
    }

    #[test]
    fn greedy_follows_hand_computed_path() {
        let m = rigged();
        let g = generate(&m, &ExtensionConfig::off(), &[0], SamplingPolicy::Greedy, 5, &[]).unwrap();
        assert_eq!(g.tokens, vec![1, 2, 0, 1, 2]);
        let g = generate(&m, &ExtensionConfig::off(), &[1], SamplingPolicy::Greedy, 5, &[0]).unwrap();
        assert_eq!(g.tokens, vec![2]);
        assert_eq!(g.stopped_by, Some(0));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let m = random_model(5);
        let ext = ExtensionConfig::off();
        let pol = SamplingPolicy::TopP { p: 0.9, seed: 11 };
        let a = generate(&m, &ext, &[1, 2], pol, 12, &[]).unwrap();
        let b = generate(&m, &ext, &[1, 2], pol, 12, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 12);
        assert!(generate(&m, &ext, &[1], SamplingPolicy::TopP { p: 0.0, seed: 0 }, 1, &[]).is_err());
    }

    #[test]
    fn argmax_ties_take_lowest_id() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(
            nucleus(&[0.25, 0.25, 0.5], 0.6),
            vec![(2, 0.5 / 0.75), (0, 0.25 / 0.75)]
        );
    }

    #[test]
    fn full_nucleus_is_whole_distribution() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let mut n = nucleus(&probs, 1.0);
        n.sort_by_key(|&(id, _)| id);
        for (i, (id, q)) in n.into_iter().enumerate() {
            assert_eq!(id as usize, i);
            assert!((q - probs[i]).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn nucleus_contains_argmax(raw in prop::collection::vec(0.0f64..1.0, 1..30), p in 0.01f64..1.0) {
            let z: f64 = raw.iter().sum::<f64>() + 1e-9;
            let probs: Vec<f64> = raw.iter().map(|x| (x + 1e-9 / raw.len() as f64) / z).collect();
            let nuc = nucleus(&probs, p);
            prop_assert!(nuc.iter().any(|&(id, _)| id as usize == argmax(&probs)));
            let mass: f64 = nuc.iter().map(|&(_, q)| q).sum();
            prop_assert!((mass - 1.0).abs() < 1e-9);
        }
    }
}
