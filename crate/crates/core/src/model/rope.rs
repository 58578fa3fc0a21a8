use crate::tensor::Float;

use super::ModelConfig;

/// Rotary inverse frequencies, always computed in f64 and cast where applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    pub inv_freq: Vec<f64>,
    pub base_used: f64,
    pub head_dim: usize,
}

/// `inv_freq[i] = base^(-2i/head_dim)`; `base_override` replaces `cfg.rope_base`.
pub fn build_rope_table(cfg: &ModelConfig, base_override: Option<f64>) -> RopeTable {
    RopeTable::new(cfg.head_dim(), base_override.unwrap_or(cfg.rope_base))
}

impl RopeTable {
    pub fn new(head_dim: usize, base: f64) -> Self {
        assert!(head_dim % 2 == 0, "head_dim must be even");
        let inv_freq = (0..head_dim / 2)
            .map(|i| base.powf(-(2.0 * i as f64) / head_dim as f64))
            .collect();
        Self {
            inv_freq,
            base_used: base,
            head_dim,
        }
    }

    /// cos/sin for positions `start..start+n`, laid out `[n, head_dim/2]`.
    pub fn angles<T: Float>(&self, start: usize, n: usize) -> RopeAngles<T> {
        let half = self.inv_freq.len();
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for p in start..start + n {
            for &f in &self.inv_freq {
                let theta = p as f64 * f;
                cos.push(T::c(theta.cos()));
                sin.push(T::c(theta.sin()));
            }
        }
        RopeAngles { cos, sin, half }
    }
}

#[derive(Debug, Clone)]
pub struct RopeAngles<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

impl<T: Float> RopeAngles<T> {
    /// Rotates pairs `(2i, 2i+1)` of every head in a `[n, heads·head_dim]` buffer.
    /// `inverse` rotates by the negated angle (the transpose, used in backprop).
    pub fn rotate(&self, x: &mut [T], row_width: usize, inverse: bool) {
        let hd = 2 * self.half;
        for (p, row) in x.chunks_exact_mut(row_width).enumerate() {
            let cos = &self.cos[p * self.half..(p + 1) * self.half];
            let sin = &self.sin[p * self.half..(p + 1) * self.half];
            for head in row.chunks_exact_mut(hd) {
                for (i, pair) in head.chunks_exact_mut(2).enumerate() {
                    let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = a * c - b * s;
                    pair[1] = a * s + b * c;
                }
            }
        }
    }
}

/// Applies rotary embedding to a `[positions, heads, head_dim]` tensor (flattened
/// row-major) whose first row sits at absolute position `start_pos`.
pub fn apply_rope<T: Float>(x: &[T], n_heads: usize, start_pos: usize, table: &RopeTable) -> Vec<T> {
    let width = n_heads * table.head_dim;
    assert_eq!(x.len() % width, 0, "input is not [positions, heads, head_dim]");
    let mut out = x.to_vec();
    let angles = table.angles::<T>(start_pos, x.len() / width);
    angles.rotate(&mut out, width, false);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn inverse_frequencies() {
        assert_eq!(RopeTable::new(2, 10_000.0).inv_freq, vec![1.0]);
        let t = RopeTable::new(4, 10_000.0);
        assert_eq!(t.inv_freq[0], 1.0);
        assert!((t.inv_freq[1] - 0.01).abs() < 1e-18);
        let t = RopeTable::new(64, 10_000.0);
        assert!(t.inv_freq.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn base_override_passes_through() {
        let cfg = ModelConfig::new(10, 8, 2, 1, 16);
        let t = build_rope_table(&cfg, Some(12_345.0));
        assert_eq!(t.base_used, 12_345.0);
        assert_eq!(t, RopeTable::new(4, 12_345.0));
        assert_eq!(build_rope_table(&cfg, None).base_used, 10_000.0);
    }

    #[test]
    fn position_zero_is_identity() {
        let t = RopeTable::new(8, 10_000.0);
        let x: Vec<f64> = (0..16).map(|i| i as f64 - 3.5).collect();
        assert_eq!(apply_rope(&x, 2, 0, &t), x);
    }

    #[test]
    fn quarter_turn() {
        let t = RopeTable {
            inv_freq: vec![FRAC_PI_2],
            base_used: 1.0,
            head_dim: 2,
        };
        let y = apply_rope(&[1.0f64, 0.0], 1, 1, &t);
        assert!(y[0].abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_undoes_rotation() {
        let t = RopeTable::new(8, 10_000.0);
        let x: Vec<f64> = (0..48).map(|i| (i as f64 * 0.7).sin()).collect();
        let angles = t.angles::<f64>(5, 3);
        let mut y = x.clone();
        angles.rotate(&mut y, 16, false);
        angles.rotate(&mut y, 16, true);
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-14));
    }
}
