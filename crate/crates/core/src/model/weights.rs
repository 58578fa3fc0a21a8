use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::tensor::{Float, Tensor};

/// One decoder block. Linear weights are stored `[in, out]` so activations multiply
/// from the left. Only the Q, K and V projections carry a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

/// Parameter family, used for weight-decay exemptions and gradient-check coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Embedding,
    Output,
    Projection,
    QkvBias,
    NormGain,
}

impl ParamKind {
    /// Whether decoupled weight decay applies to this family.
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::QkvBias | ParamKind::NormGain)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    /// `[vocab_size, hidden]`
    pub embedding: Tensor<T>,
    /// `[hidden, vocab_size]`; `None` when the output projection is tied to the embedding.
    pub output: Option<Tensor<T>>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Tensor<T>,
}

impl<T: Float> Weights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (h, f, v) = (cfg.hidden, cfg.ffn_hidden, cfg.vocab_size);
        let layer = LayerWeights {
            attn_norm: Tensor::zeros(&[h]),
            wq: Tensor::zeros(&[h, h]),
            bq: Tensor::zeros(&[h]),
            wk: Tensor::zeros(&[h, h]),
            bk: Tensor::zeros(&[h]),
            wv: Tensor::zeros(&[h, h]),
            bv: Tensor::zeros(&[h]),
            wo: Tensor::zeros(&[h, h]),
            ffn_norm: Tensor::zeros(&[h]),
            w_gate: Tensor::zeros(&[h, f]),
            w_up: Tensor::zeros(&[h, f]),
            w_down: Tensor::zeros(&[f, h]),
        };
        Self {
            embedding: Tensor::zeros(&[v, h]),
            output: (!cfg.tie_embeddings).then(|| Tensor::zeros(&[h, v])),
            layers: vec![layer; cfg.n_layers],
            final_norm: Tensor::zeros(&[h]),
        }
    }

    /// Normal(0, 0.02) matrices with residual-output projections shrunk by
    /// `1/sqrt(2·n_layers)`; unit norm gains; zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(cfg);
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, resid_std).expect("valid std");
        let fill = |t: &mut Tensor<T>, d: &Normal<f64>, rng: &mut dyn rand::RngCore| {
            t.data_mut().iter_mut().for_each(|x| *x = T::c(d.sample(rng)));
        };
        fill(&mut w.embedding, &normal, rng);
        if let Some(out) = w.output.as_mut() {
            fill(out, &normal, rng);
        }
        for l in &mut w.layers {
            l.attn_norm.fill(T::one());
            l.ffn_norm.fill(T::one());
            fill(&mut l.wq, &normal, rng);
            fill(&mut l.wk, &normal, rng);
            fill(&mut l.wv, &normal, rng);
            fill(&mut l.wo, &resid, rng);
            fill(&mut l.w_gate, &normal, rng);
            fill(&mut l.w_up, &normal, rng);
            fill(&mut l.w_down, &resid, rng);
        }
        w.final_norm.fill(T::one());
        w
    }

    /// Visits every parameter tensor in canonical order.
    pub fn visit(&self, mut f: impl FnMut(&str, ParamKind, &Tensor<T>)) {
        f("embedding", ParamKind::Embedding, &self.embedding);
        if let Some(out) = &self.output {
            f("output", ParamKind::Output, out);
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, kind, t) in l.named() {
                f(&format!("layers.{i}.{name}"), kind, t);
            }
        }
        f("final_norm", ParamKind::NormGain, &self.final_norm);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f("embedding", ParamKind::Embedding, &mut self.embedding);
        if let Some(out) = &mut self.output {
            f("output", ParamKind::Output, out);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, kind, t) in l.named_mut() {
                f(&format!("layers.{i}.{name}"), kind, t);
            }
        }
        f("final_norm", ParamKind::NormGain, &mut self.final_norm);
    }

    /// Flattened views of all parameters, in `visit` order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embedding];
        out.extend(self.output.as_ref());
        for l in &self.layers {
            out.extend(l.named().into_iter().map(|(_, _, t)| t));
        }
        out.push(&self.final_norm);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.output.as_mut());
        for l in &mut self.layers {
            out.extend(l.named_mut().into_iter().map(|(_, _, t)| t));
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn add_assign(&mut self, other: &Weights<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(s));
    }

    pub fn zero(&mut self) {
        self.tensors_mut().into_iter().for_each(|t| t.fill(T::zero()));
    }

    pub fn sum_sq(&self) -> T {
        self.tensors().into_iter().map(Tensor::sum_sq).sum()
    }

    pub fn cast<U: Float>(&self) -> Weights<U> {
        Weights {
            embedding: self.embedding.cast(),
            output: self.output.as_ref().map(Tensor::cast),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
        }
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), String> {
        let reference = Weights::<T>::zeros(cfg);
        let mut want = Vec::new();
        reference.visit(|name, _, t| want.push((name.to_string(), t.shape().to_vec())));
        let mut got = Vec::new();
        self.visit(|name, _, t| got.push((name.to_string(), t.shape().to_vec())));
        if want == got {
            Ok(())
        } else {
            let diff = want
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {a:?}, found {b:?}"))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", want.len(), got.len()));
            Err(diff)
        }
    }
}

impl<T> LayerWeights<T> {
    pub fn named(&self) -> [(&'static str, ParamKind, &Tensor<T>); 12] {
        use ParamKind::*;
        [
            ("attn_norm", NormGain, &self.attn_norm),
            ("wq", Projection, &self.wq),
            ("bq", QkvBias, &self.bq),
            ("wk", Projection, &self.wk),
            ("bk", QkvBias, &self.bk),
            ("wv", Projection, &self.wv),
            ("bv", QkvBias, &self.bv),
            ("wo", Projection, &self.wo),
            ("ffn_norm", NormGain, &self.ffn_norm),
            ("w_gate", Projection, &self.w_gate),
            ("w_up", Projection, &self.w_up),
            ("w_down", Projection, &self.w_down),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, ParamKind, &mut Tensor<T>); 12] {
        use ParamKind::*;
        [
            ("attn_norm", NormGain, &mut self.attn_norm),
            ("wq", Projection, &mut self.wq),
            ("bq", QkvBias, &mut self.bq),
            ("wk", Projection, &mut self.wk),
            ("bk", QkvBias, &mut self.bk),
            ("wv", Projection, &mut self.wv),
            ("bv", QkvBias, &mut self.bv),
            ("wo", Projection, &mut self.wo),
            ("ffn_norm", NormGain, &mut self.ffn_norm),
            ("w_gate", Projection, &mut self.w_gate),
            ("w_up", Projection, &mut self.w_up),
            ("w_down", Projection, &mut self.w_down),
        ]
    }
}
