use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{attend_head, HeadView};
use super::kernels::{rmsnorm_rows, swish};
use super::rope::RopeAngles;
use super::{KvCache, ModelConfig, ModelError, Weights};
use crate::extension::{configure_inference, ExtensionConfig, InferencePlan};
use crate::tensor::{matmul, Float, Tensor};
use crate::tokenizer::TokenId;

/// A configured decoder: hyperparameters plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub weights: Weights<T>,
}

/// Activations recorded for one decoder block during a training forward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerTape<T> {
    pub x_in: Vec<T>,
    pub inv_rms1: Vec<T>,
    pub h1: Vec<T>,
    /// Post-RoPE queries and keys.
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// `[heads, n, n]`
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub attn_drop: Option<Vec<T>>,
    pub x_mid: Vec<T>,
    pub inv_rms2: Vec<T>,
    pub h2: Vec<T>,
    pub gate: Vec<T>,
    pub up: Vec<T>,
    pub act: Vec<T>,
    pub ffn_drop: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct Tape<T> {
    pub ids: Vec<TokenId>,
    pub layers: Vec<LayerTape<T>>,
    pub x_final: Vec<T>,
    pub inv_rms_final: Vec<T>,
    pub h_final: Vec<T>,
    pub angles: RopeAngles<T>,
    pub plan: InferencePlan,
}

/// Inverted dropout on residual branches.
pub(crate) struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask<T: Float>(&mut self, len: usize) -> Vec<T> {
        let keep = T::c(1.0 / (1.0 - self.p));
        (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < self.p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    }
}

fn add_bias<T: Float>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (a, &b) in row.iter_mut().zip(bias) {
            *a += b;
        }
    }
}

impl<T: Float> Model<T> {
    pub fn new(cfg: ModelConfig, weights: Weights<T>) -> Result<Self, ModelError> {
        let cfg = cfg.validated()?;
        weights.check_shapes(&cfg).map_err(ModelError::Shape)?;
        Ok(Self { cfg, weights })
    }

    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let cfg = cfg.validated()?;
        let weights = Weights::init(&cfg, rng);
        Ok(Self { cfg, weights })
    }

    pub fn new_cache(&self, max_len: usize) -> KvCache<T> {
        KvCache::new(self.cfg.n_layers, self.cfg.hidden, max_len)
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        match ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            Some(&id) => Err(ModelError::Domain(format!(
                "token id {id} out of range for vocabulary of {}",
                self.cfg.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Logits `[ids.len(), vocab_size]`. With a cache, `ids` continue the cached prefix
    /// and their keys/values are appended.
    pub fn forward(
        &self,
        ids: &[TokenId],
        ext: &ExtensionConfig,
        cache: Option<&mut KvCache<T>>,
    ) -> Result<Tensor<T>, ModelError> {
        self.check_ids(ids)?;
        let Some(cache) = cache else {
            let plan = configure_inference(&self.cfg, ext, ids.len())?;
            return Ok(self.run(ids, 0, &plan, None, None, None));
        };
        let total = cache.len() + ids.len();
        if total > cache.max_len() {
            return Err(ModelError::Domain(format!(
                "cache holds {} positions; {total} requested",
                cache.max_len()
            )));
        }
        let plan = configure_inference(&self.cfg, ext, total)?;
        if !cache.is_empty() && cache.rope_base() != Some(plan.rope.base_used) {
            // Cached keys carry rotations for a different base; rebuild from tokens.
            let mut all = cache.tokens().to_vec();
            all.extend_from_slice(ids);
            cache.clear();
            cache.reencodes += 1;
            cache.rope_base = Some(plan.rope.base_used);
            let logits = self.run(&all, 0, &plan, Some(cache), None, None);
            let v = self.cfg.vocab_size;
            let tail = logits.data()[(all.len() - ids.len()) * v..].to_vec();
            return Ok(Tensor::from_vec(&[ids.len(), v], tail));
        }
        cache.rope_base = Some(plan.rope.base_used);
        let start = cache.len();
        Ok(self.run(ids, start, &plan, Some(cache), None, None))
    }

    /// Forward pass with no extension techniques.
    pub fn forward_vanilla(&self, ids: &[TokenId]) -> Result<Tensor<T>, ModelError> {
        self.forward(ids, &ExtensionConfig::off(), None)
    }

    /// Training forward: records a tape for backprop.
    pub(crate) fn forward_train(
        &self,
        ids: &[TokenId],
        dropout: Option<Dropout<'_>>,
    ) -> Result<(Tensor<T>, Tape<T>), ModelError> {
        self.check_ids(ids)?;
        let plan = configure_inference(&self.cfg, &ExtensionConfig::off(), ids.len())?;
        let mut tape = Tape {
            ids: ids.to_vec(),
            layers: Vec::with_capacity(self.cfg.n_layers),
            x_final: Vec::new(),
            inv_rms_final: Vec::new(),
            h_final: Vec::new(),
            angles: plan.rope.angles(0, ids.len()),
            plan: plan.clone(),
        };
        let logits = self.run(ids, 0, &plan, None, Some(&mut tape), dropout);
        Ok((logits, tape))
    }

    fn run(
        &self,
        ids: &[TokenId],
        start: usize,
        plan: &InferencePlan,
        mut cache: Option<&mut KvCache<T>>,
        mut tape: Option<&mut Tape<T>>,
        mut dropout: Option<Dropout<'_>>,
    ) -> Tensor<T> {
        let cfg = &self.cfg;
        let w = &self.weights;
        let (n, h, f, v) = (ids.len(), cfg.hidden, cfg.ffn_hidden, cfg.vocab_size);
        let (heads, hd) = (cfg.n_heads, cfg.head_dim());
        let eps = T::c(cfg.norm_eps);
        let total = start + n;
        let angles: RopeAngles<T> = plan.rope.angles(start, n);

        let mut x = vec![T::zero(); n * h];
        for (row, &id) in x.chunks_exact_mut(h).zip(ids) {
            row.copy_from_slice(w.embedding.row(id as usize));
        }

        let mut h1 = vec![T::zero(); n * h];
        let mut inv1 = vec![T::zero(); n];
        let mut q = vec![T::zero(); n * h];
        let mut k = vec![T::zero(); n * h];
        let mut val = vec![T::zero(); n * h];
        let mut ctx = vec![T::zero(); n * h];
        let mut attn_out = vec![T::zero(); n * h];
        let mut gate = vec![T::zero(); n * f];
        let mut up = vec![T::zero(); n * f];
        let mut act = vec![T::zero(); n * f];
        let mut ffn_out = vec![T::zero(); n * h];
        let mut probs_scratch = Vec::new();
        let row_scale = |pos: usize| T::c(plan.logit_scale(pos));

        for (li, lw) in w.layers.iter().enumerate() {
            let x_in = tape.is_some().then(|| x.clone());
            rmsnorm_rows(&x, lw.attn_norm.data(), eps, &mut h1, Some(&mut inv1));
            matmul(&h1, lw.wq.data(), &mut q, n, h, h, false);
            matmul(&h1, lw.wk.data(), &mut k, n, h, h, false);
            matmul(&h1, lw.wv.data(), &mut val, n, h, h, false);
            add_bias(&mut q, lw.bq.data());
            add_bias(&mut k, lw.bk.data());
            add_bias(&mut val, lw.bv.data());
            angles.rotate(&mut q, h, false);
            angles.rotate(&mut k, h, false);

            let mask = &plan.masks[li];
            let mut probs_tape = tape.is_some().then(|| vec![T::zero(); heads * n * total]);
            {
                let (keys, values): (&[T], &[T]) = match cache.as_deref_mut() {
                    Some(c) => {
                        let lkv = &mut c.layers[li];
                        lkv.k.extend_from_slice(&k);
                        lkv.v.extend_from_slice(&val);
                        (&c.layers[li].k, &c.layers[li].v)
                    }
                    None => (&k, &val),
                };
                for head in 0..heads {
                    let probs: &mut [T] = match probs_tape.as_mut() {
                        Some(p) => &mut p[head * n * total..(head + 1) * n * total],
                        None => {
                            probs_scratch.resize(n * total, T::zero());
                            &mut probs_scratch
                        }
                    };
                    let off = head * hd;
                    attend_head(
                        HeadView {
                            data: &q,
                            offset: off,
                            stride: h,
                        },
                        HeadView {
                            data: keys,
                            offset: off,
                            stride: h,
                        },
                        HeadView {
                            data: values,
                            offset: off,
                            stride: h,
                        },
                        n,
                        total,
                        hd,
                        start,
                        mask,
                        &row_scale,
                        probs,
                        &mut ctx,
                        off,
                        h,
                    );
                }
            }
            matmul(&ctx, lw.wo.data(), &mut attn_out, n, h, h, false);
            let attn_drop = dropout.as_mut().map(|d| d.mask::<T>(n * h));
            if let Some(m) = &attn_drop {
                attn_out.iter_mut().zip(m).for_each(|(a, &s)| *a *= s);
            }
            x.iter_mut().zip(&attn_out).for_each(|(a, &b)| *a += b);

            let x_mid = tape.is_some().then(|| x.clone());
            let mut h2 = vec![T::zero(); n * h];
            let mut inv2 = vec![T::zero(); n];
            rmsnorm_rows(&x, lw.ffn_norm.data(), eps, &mut h2, Some(&mut inv2));
            matmul(&h2, lw.w_gate.data(), &mut gate, n, h, f, false);
            matmul(&h2, lw.w_up.data(), &mut up, n, h, f, false);
            for ((a, &g), &u) in act.iter_mut().zip(&gate).zip(&up) {
                *a = swish(g) * u;
            }
            matmul(&act, lw.w_down.data(), &mut ffn_out, n, f, h, false);
            let ffn_drop = dropout.as_mut().map(|d| d.mask::<T>(n * h));
            if let Some(m) = &ffn_drop {
                ffn_out.iter_mut().zip(m).for_each(|(a, &s)| *a *= s);
            }
            x.iter_mut().zip(&ffn_out).for_each(|(a, &b)| *a += b);

            if let Some(t) = tape.as_deref_mut() {
                t.layers.push(LayerTape {
                    x_in: x_in.expect("recorded"),
                    inv_rms1: inv1.clone(),
                    h1: h1.clone(),
                    q: q.clone(),
                    k: k.clone(),
                    v: val.clone(),
                    probs: probs_tape.take().expect("recorded"),
                    ctx: ctx.clone(),
                    attn_drop,
                    x_mid: x_mid.expect("recorded"),
                    inv_rms2: inv2,
                    h2,
                    gate: gate.clone(),
                    up: up.clone(),
                    act: act.clone(),
                    ffn_drop,
                });
            }
        }

        let mut hf = vec![T::zero(); n * h];
        let mut invf = vec![T::zero(); n];
        rmsnorm_rows(&x, w.final_norm.data(), eps, &mut hf, Some(&mut invf));
        let mut logits = vec![T::zero(); n * v];
        match &w.output {
            Some(out) => matmul(&hf, out.data(), &mut logits, n, h, v, false),
            None => crate::tensor::matmul_nt(&hf, w.embedding.data(), &mut logits, n, h, v, false),
        }
        if let Some(c) = cache {
            c.tokens.extend_from_slice(ids);
            c.check_consistent();
        }
        if let Some(t) = tape {
            t.x_final = x;
            t.inv_rms_final = invf;
            t.h_final = hf;
        }
        Tensor::from_vec(&[n, v], logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::{NtkMode, WindowSchedule};
    use crate::model::{apply_rope, RopeTable};
    use rand::SeedableRng;

    fn tiny(precision_seed: u64, tie: bool) -> Model<f64> {
        let mut cfg = ModelConfig::new(37, 16, 2, 2, 8);
        cfg.tie_embeddings = tie;
        let mut rng = ChaCha8Rng::seed_from_u64(precision_seed);
        let mut m = Model::<f64>::init(cfg, &mut rng).unwrap();
        // Bigger weights so the test exercises non-trivial attention patterns.
        m.weights.tensors_mut().into_iter().for_each(|t| t.scale(8.0));
        m
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let m = tiny(0, false);
        assert!(matches!(m.forward_vanilla(&[1, 37]), Err(ModelError::Domain(_))));
    }

    #[test]
    fn causality_bit_exact() {
        let m = tiny(1, false);
        let a = m.forward_vanilla(&[3, 5, 7, 11, 13]).unwrap();
        let b = m.forward_vanilla(&[3, 5, 7, 30, 2]).unwrap();
        assert_eq!(a.row(2), b.row(2));
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn cache_matches_batch() {
        for tie in [false, true] {
            let m = tiny(2, tie);
            let ids: Vec<TokenId> = (0..20).map(|i| (i * 7 % 37) as TokenId).collect();
            let full = m.forward_vanilla(&ids).unwrap();
            let mut cache = m.new_cache(64);
            let ext = ExtensionConfig::off();
            let first = m.forward(&ids[..5], &ext, Some(&mut cache)).unwrap();
            let mut diff = full.data()[..5 * 37]
                .iter()
                .zip(first.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            for (t, &id) in ids.iter().enumerate().skip(5) {
                let step = m.forward(&[id], &ext, Some(&mut cache)).unwrap();
                for (a, b) in full.row(t).iter().zip(step.data()) {
                    diff = diff.max((a - b).abs());
                }
            }
            assert!(diff < 1e-10, "{diff}");
            assert_eq!(cache.len(), 20);
        }
    }

    #[test]
    fn cache_overflow_is_error() {
        let m = tiny(3, false);
        let mut cache = m.new_cache(4);
        assert!(m
            .forward(&[1, 2, 3, 4, 5], &ExtensionConfig::off(), Some(&mut cache))
            .is_err());
    }

    #[test]
    fn dynamic_ntk_reencodes_on_scale_change() {
        let m = tiny(4, false);
        let ext = ExtensionConfig {
            ntk: NtkMode::Dynamic { chunk: Some(4) },
            ..Default::default()
        };
        let ids: Vec<TokenId> = (0..14).map(|i| (i * 5 % 37) as TokenId).collect();
        let mut cache = m.new_cache(64);
        for (t, &id) in ids.iter().enumerate() {
            let step = m.forward(&[id], &ext, Some(&mut cache)).unwrap();
            // Each step must agree with a fresh full forward at the same length.
            let full = m.forward(&ids[..=t], &ext, None).unwrap();
            let d = full
                .row(t)
                .iter()
                .zip(step.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(d < 1e-10, "step {t}: {d}");
        }
        // train_context 8, chunk 4: scale changes at lengths 9 and 13.
        assert_eq!(cache.reencode_count(), 2);
    }

    #[test]
    fn windows_and_logn_match_between_cache_and_batch() {
        let m = tiny(5, false);
        let ext = ExtensionConfig {
            ntk: NtkMode::Static { scale: 2.0 },
            logn: true,
            windows: Some(WindowSchedule::Explicit(vec![3, 6])),
        };
        let ids: Vec<TokenId> = (0..16).map(|i| (i * 3 % 37) as TokenId).collect();
        let full = m.forward(&ids, &ext, None).unwrap();
        let mut cache = m.new_cache(16);
        for (t, &id) in ids.iter().enumerate() {
            let step = m.forward(&[id], &ext, Some(&mut cache)).unwrap();
            let d = full
                .row(t)
                .iter()
                .zip(step.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(d < 1e-10, "{t}: {d}");
        }
    }

    #[test]
    fn logn_scale_commutes_with_rotation() {
        let table = RopeTable::new(8, 10_000.0);
        let q: Vec<f64> = (0..8).map(|i| (i as f64 * 1.7).sin()).collect();
        let scaled: Vec<f64> = q.iter().map(|x| x * 1.25).collect();
        let a = apply_rope(&scaled, 1, 37, &table);
        let b: Vec<f64> = apply_rope(&q, 1, 37, &table).iter().map(|x| x * 1.25).collect();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    #[test]
    fn training_forward_matches_inference() {
        let m = tiny(6, false);
        let ids = [1, 4, 9, 16, 25, 36];
        let (logits, tape) = m.forward_train(&ids, None).unwrap();
        assert_eq!(logits, m.forward_vanilla(&ids).unwrap());
        assert_eq!(tape.layers.len(), 2);
        assert_eq!(tape.layers[0].probs.len(), 2 * 6 * 6);
    }
}
