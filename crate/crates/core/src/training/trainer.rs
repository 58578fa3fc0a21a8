use std::ops::ControlFlow;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::backprop::backward;
use super::loss::{cross_entropy_grad_in_place, token_nll};
use super::{clip_grad_norm, lr_at, pack_documents, AdamW, Batch, Example, TrainConfig, TrainError};
use crate::model::{Dropout, Model, Weights};
use crate::tensor::Float;
use crate::tokenizer::TokenId;

/// What one optimizer step reported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Loss-bearing tokens in the batch.
    pub tokens: usize,
}

struct DropoutSpec {
    p: f64,
    seed: u64,
    step: usize,
}

fn check_example(e: &Example) -> Result<(), TrainError> {
    if e.inputs.len() != e.targets.len() || e.inputs.len() != e.loss_mask.len() {
        return Err(TrainError::Shape(format!(
            "example has {} inputs, {} targets, {} mask entries",
            e.inputs.len(),
            e.targets.len(),
            e.loss_mask.len()
        )));
    }
    Ok(())
}

fn example_gradients<T: Float>(
    model: &Model<T>,
    e: &Example,
    denom: T,
    dropout: Option<(&DropoutSpec, usize)>,
) -> Result<(T, Weights<T>), TrainError> {
    let mut rng;
    let drop = match dropout {
        Some((spec, row)) if spec.p > 0.0 => {
            // One independent stream per (step, row), so the result does not depend on
            // how rows are scheduled across threads.
            rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((spec.step as u64) << 20) | row as u64);
            Some(Dropout {
                p: spec.p,
                rng: &mut rng,
            })
        }
        _ => None,
    };
    let (mut logits, tape) = model.forward_train(&e.inputs, drop)?;
    let nll = token_nll(&logits, &e.targets);
    let loss_sum: T = nll
        .iter()
        .zip(&e.loss_mask)
        .filter(|(_, &m)| m != 0)
        .map(|(&l, _)| l)
        .sum();
    cross_entropy_grad_in_place(&mut logits, &e.targets, &e.loss_mask, denom);
    let mut grads = Weights::zeros(&model.cfg);
    backward(model, &tape, logits.data(), &mut grads);
    Ok((loss_sum, grads))
}

fn batch_gradients<T: Float>(
    model: &Model<T>,
    batch: &[Example],
    dropout: Option<&DropoutSpec>,
) -> Result<(T, Weights<T>, usize), TrainError> {
    batch.iter().try_for_each(check_example)?;
    let tokens: usize = batch.iter().map(Example::masked_tokens).sum();
    if tokens == 0 {
        return Err(TrainError::Domain("batch has no loss-bearing tokens".into()));
    }
    let denom = T::c(tokens as f64);
    let parts: Vec<Result<(T, Weights<T>), TrainError>> = batch
        .par_iter()
        .enumerate()
        .map(|(row, e)| example_gradients(model, e, denom, dropout.map(|d| (d, row))))
        .collect();
    // Reduce in row order so the sum is independent of thread scheduling.
    let mut loss = T::zero();
    let mut grads = Weights::zeros(&model.cfg);
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss / denom, grads, tokens))
}

/// Mean masked next-token loss over `batch` and its gradient with respect to every
/// parameter (no dropout).
pub fn loss_and_gradients<T: Float>(model: &Model<T>, batch: &[Example]) -> Result<(T, Weights<T>), TrainError> {
    batch_gradients(model, batch, None).map(|(l, g, _)| (l, g))
}

/// One optimizer update. `step` counts from 1 and selects the learning rate.
pub fn train_step<T: Float>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &[Example],
    tc: &TrainConfig,
    step: usize,
) -> Result<StepMetrics, TrainError> {
    let spec = DropoutSpec {
        p: tc.dropout,
        seed: tc.seed,
        step,
    };
    let (loss, mut grads, tokens) = batch_gradients(model, batch, Some(&spec))?;
    let loss = loss.to_f64().unwrap_or(f64::NAN);
    if !loss.is_finite() {
        return Err(TrainError::NonFinite { step, what: "loss" });
    }
    let grad_norm = clip_grad_norm(&mut grads, tc.grad_clip);
    if !grad_norm.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            what: "gradient norm",
        });
    }
    let lr = lr_at(step, tc);
    opt.update(&mut model.weights, &grads, lr, tc);
    Ok(StepMetrics {
        step,
        loss,
        grad_norm,
        lr,
        tokens,
    })
}

/// Runs steps `start_step + 1 ..= tc.total_steps`, pulling batches from a producer
/// thread through a bounded queue. `on_step` sees each step's metrics and the updated
/// model and may stop the run early.
pub fn run_training<T: Float, I>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batches: I,
    tc: &TrainConfig,
    start_step: usize,
    mut on_step: impl FnMut(&StepMetrics, &Model<T>) -> ControlFlow<()>,
) -> Result<Vec<StepMetrics>, TrainError>
where
    I: Iterator<Item = Batch> + Send,
{
    tc.validate()?;
    let steps = tc.total_steps.saturating_sub(start_step);
    let (tx, rx) = sync_channel::<Batch>(4);
    std::thread::scope(|s| {
        s.spawn(move || {
            for b in batches.take(steps) {
                if tx.send(b).is_err() {
                    break;
                }
            }
        });
        let mut history = Vec::with_capacity(steps);
        for step in start_step + 1..=tc.total_steps {
            let Ok(batch) = rx.recv() else {
                return Err(TrainError::Domain(format!("batch source ran dry before step {step}")));
            };
            let m = train_step(model, opt, &batch, tc, step)?;
            history.push(m);
            if on_step(&m, model).is_break() {
                break;
            }
        }
        drop(rx);
        Ok(history)
    })
}

/// Endless stream of pretraining batches: each epoch reshuffles and repacks the
/// documents into `context + 1`-token rows, giving `context`-token inputs.
pub fn pretraining_batches<'a>(
    docs: &'a [Vec<TokenId>],
    eod: TokenId,
    tc: &TrainConfig,
) -> Result<impl Iterator<Item = Batch> + Send + 'a, TrainError> {
    let (row_len, batch_size, seed) = (tc.context + 1, tc.batch_size, tc.seed);
    let total: usize = docs.iter().map(|d| d.len() + 1).sum();
    if total < row_len {
        return Err(TrainError::Domain(format!(
            "corpus has {total} tokens, fewer than one {row_len}-token row"
        )));
    }
    let rows = (0u64..).flat_map(move |epoch| {
        pack_documents(docs.iter().cloned(), row_len, eod, Some(seed.wrapping_add(epoch)))
            .map(|r| Example::from_row(&r))
    });
    Ok(Chunks {
        inner: rows,
        size: batch_size,
    })
}

/// Endless stream of batches that visits `examples` in a fresh seeded order each epoch.
pub fn shuffled_batches(
    examples: Vec<Example>,
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Batch> + Send, TrainError> {
    if examples.is_empty() || batch_size == 0 {
        return Err(TrainError::Domain(
            "need at least one example and a positive batch size".into(),
        ));
    }
    let rows = (0u64..).flat_map(move |epoch| {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch)));
        let picked: Vec<Example> = order.into_iter().map(|i| examples[i].clone()).collect();
        picked
    });
    Ok(Chunks {
        inner: rows,
        size: batch_size,
    })
}

struct Chunks<I> {
    inner: I,
    size: usize,
}

impl<I: Iterator<Item = Example>> Iterator for Chunks<I> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b: Batch = self.inner.by_ref().take(self.size).collect();
        (b.len() == self.size).then_some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::training::masked_cross_entropy;

    fn model(tie: bool) -> Model<f64> {
        let mut cfg = ModelConfig::new(23, 8, 2, 2, 8);
        cfg.tie_embeddings = tie;
        let mut m = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        m.weights.tensors_mut().into_iter().for_each(|t| t.scale(10.0));
        m.weights.visit_mut(|_, kind, t| {
            if kind == crate::model::ParamKind::NormGain {
                t.data_mut()
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, x)| *x = 1.0 + 0.1 * i as f64);
            }
        });
        m
    }

    fn batch() -> Batch {
        vec![
            Example::from_masked(&[1, 4, 9, 16, 2, 5], &[0, 0, 1, 1, 0, 1]),
            Example::from_row(&[3, 3, 7, 22, 0]),
        ]
    }

    #[test]
    fn loss_agrees_with_forward() {
        let m = model(false);
        let b = batch();
        let (loss, _) = loss_and_gradients(&m, &b).unwrap();
        let mut sum = 0.0;
        let mut count = 0.0;
        for e in &b {
            let logits = m.forward_vanilla(&e.inputs).unwrap();
            let (l, _) = masked_cross_entropy(&logits, &e.targets, &e.loss_mask).unwrap();
            sum += l * e.masked_tokens() as f64;
            count += e.masked_tokens() as f64;
        }
        assert!((loss - sum / count).abs() < 1e-13);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for tie in [false, true] {
            let m = model(tie);
            let b = batch();
            let (_, grads) = loss_and_gradients(&m, &b).unwrap();
            let mut analytic = Vec::new();
            grads.visit(|name, _, t| analytic.push((name.to_string(), t.clone())));
            for (ti, (name, g)) in analytic.iter().enumerate() {
                for idx in [0, g.len() / 2, g.len() - 1] {
                    let eval = |delta: f64| {
                        let mut p = m.clone();
                        p.weights.tensors_mut()[ti].data_mut()[idx] += delta;
                        loss_and_gradients(&p, &b).unwrap().0
                    };
                    let e = 1e-5;
                    let fd = (eval(e) - eval(-e)) / (2.0 * e);
                    let an = g.data()[idx];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(rel < 1e-5, "{name}[{idx}] tie={tie}: fd {fd} analytic {an}");
                }
            }
        }
    }

    #[test]
    fn empty_mask_batch_is_rejected() {
        let m = model(false);
        let b = vec![Example::from_masked(&[1, 2, 3], &[1, 0, 0])];
        assert!(matches!(loss_and_gradients(&m, &b), Err(TrainError::Domain(_))));
    }

    #[test]
    fn dropout_is_reproducible() {
        let tc = TrainConfig {
            dropout: 0.2,
            warmup_steps: 0,
            total_steps: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = model(false);
            let mut opt = AdamW::new(&m.cfg);
            let batches = std::iter::repeat(batch());
            let h = run_training(&mut m, &mut opt, batches, &tc, 0, |_, _| ControlFlow::Continue(())).unwrap();
            (h, m)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(h1.len(), 3);
        assert_eq!(h1[2].lr, 0.1 * tc.peak_lr);
    }

    #[test]
    fn non_finite_loss_is_reported_with_step() {
        let mut m = model(false);
        m.weights.embedding.data_mut()[8] = f64::NAN;
        let mut opt = AdamW::new(&m.cfg);
        let err = train_step(&mut m, &mut opt, &batch(), &TrainConfig::default(), 17).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 17, .. }));
    }

    #[test]
    fn pretraining_batches_have_context_inputs() {
        let docs: Vec<Vec<TokenId>> = (0..30).map(|i| vec![i % 20; 5 + i as usize % 4]).collect();
        let tc = TrainConfig {
            context: 6,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let batches: Vec<Batch> = pretraining_batches(&docs, 22, &tc).unwrap().take(50).collect();
        assert_eq!(batches.len(), 50);
        for b in &batches {
            assert_eq!(b.len(), 3);
            assert!(b.iter().all(|e| e.inputs.len() == 6 && e.masked_tokens() == 6));
        }
        assert!(pretraining_batches(&docs[..1], 22, &TrainConfig::default()).is_err());
    }
}
