use super::TrainConfig;
use crate::model::{ModelConfig, Weights};
use crate::tensor::Float;

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut Weights<T>, max_norm: f64) -> f64 {
    let norm = grads.sum_sq().to_f64().unwrap_or(f64::NAN).sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::c(max_norm / norm));
    }
    norm
}

/// AdamW with decoupled weight decay. Biases and norm gains are never decayed.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Weights<T>,
    v: Weights<T>,
    t: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: Weights::zeros(cfg),
            v: Weights::zeros(cfg),
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut Weights<T>, grads: &Weights<T>, lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (tc.beta1, tc.beta2);
        let bc1 = T::c(1.0 - b1.powi(self.t as i32));
        let bc2 = T::c(1.0 - b2.powi(self.t as i32));
        let (b1, b2) = (T::c(b1), T::c(b2));
        let (one, eps, lr_t) = (T::one(), T::c(tc.eps), T::c(lr));
        let decay = T::c(lr * tc.weight_decay);

        let mut kinds = Vec::new();
        grads.visit(|_, kind, _| kinds.push(kind));
        let params = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((p, g), m), v), kind) in params.into_iter().zip(grads.tensors()).zip(ms).zip(vs).zip(kinds) {
            let decays = kind.decays();
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                if decays {
                    *p -= decay * *p;
                }
                *p -= lr_t * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::new(20, 8, 2, 1, 4).validated().unwrap()
    }

    #[test]
    fn clip_scales_to_max() {
        let c = cfg();
        let mut g = Weights::<f64>::zeros(&c);
        g.embedding.data_mut()[0] = 3.0;
        g.final_norm.data_mut()[0] = 4.0;
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.sum_sq().sqrt() - 1.0).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut g, 10.0), g.sum_sq().sqrt());
    }

    #[test]
    fn first_step_moves_by_lr_and_skips_decay_on_gains() {
        let c = cfg();
        let tc = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut p = Weights::<f64>::zeros(&c);
        p.visit_mut(|_, _, t| t.fill(1.0));
        let mut g = Weights::<f64>::zeros(&c);
        g.visit_mut(|_, _, t| t.fill(0.25));
        let mut opt = AdamW::new(&c);
        opt.update(&mut p, &g, 0.01, &tc);
        // Bias-corrected first step: update = g/|g| (up to eps) = 1.
        let gain = p.final_norm.data()[0];
        assert!((gain - (1.0 - 0.01)).abs() < 1e-9, "{gain}");
        let bias = p.layers[0].bq.data()[0];
        assert!((bias - 0.99).abs() < 1e-9);
        let proj = p.layers[0].wq.data()[0];
        assert!((proj - (1.0 - 0.01 * 0.5 - 0.01)).abs() < 1e-9, "{proj}");
        let emb = p.embedding.data()[0];
        assert!((emb - proj).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }
}
