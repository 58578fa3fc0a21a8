//! Elementwise and row-wise kernels shared by inference and training.

use crate::tensor::{matmul, Float, Tensor};

#[inline]
pub fn sigmoid<T: Float>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// `z · sigmoid(z)`
#[inline]
pub fn swish<T: Float>(z: T) -> T {
    z * sigmoid(z)
}

/// d swish / dz
#[inline]
pub fn swish_grad<T: Float>(z: T) -> T {
    let s = sigmoid(z);
    s + z * s * (T::one() - s)
}

/// `gain ⊙ x / sqrt(mean(x²) + eps)` for a single vector.
pub fn rmsnorm<T: Float>(x: &[T], gain: &[T], eps: T) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    rmsnorm_rows(x, gain, eps, &mut out, None);
    out
}

/// Row-wise RMSNorm over a `[rows, gain.len()]` matrix. Optionally records each row's
/// inverse RMS for the backward pass.
pub fn rmsnorm_rows<T: Float>(x: &[T], gain: &[T], eps: T, out: &mut [T], mut inv_rms: Option<&mut [T]>) {
    let h = gain.len();
    let inv_h = T::one() / T::c(h as f64);
    for (r, (xr, yr)) in x.chunks_exact(h).zip(out.chunks_exact_mut(h)).enumerate() {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() * inv_h;
        let inv = T::one() / (ms + eps).sqrt();
        for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *y = g * v * inv;
        }
        if let Some(buf) = inv_rms.as_deref_mut() {
            buf[r] = inv;
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Natural-log softmax normalizer `log Σ exp(row)`.
pub fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `W_down · (swish(W_gate·x) ⊙ (W_up·x))` for a single vector. Weights are stored
/// `[in, out]`: gate/up `[hidden, ffn]`, down `[ffn, hidden]`.
pub fn swiglu_ffn<T: Float>(x: &[T], w_gate: &Tensor<T>, w_up: &Tensor<T>, w_down: &Tensor<T>) -> Vec<T> {
    let h = x.len();
    let f = w_gate.shape()[1];
    let mut gate = vec![T::zero(); f];
    let mut up = vec![T::zero(); f];
    matmul(x, w_gate.data(), &mut gate, 1, h, f, false);
    matmul(x, w_up.data(), &mut up, 1, h, f, false);
    for (g, &u) in gate.iter_mut().zip(&up) {
        *g = swish(*g) * u;
    }
    let mut out = vec![T::zero(); h];
    matmul(&gate, w_down.data(), &mut out, 1, f, h, false);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_rmsnorm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + eps).sqrt();
        x.iter().zip(g).map(|(v, gi)| gi * v / rms).collect()
    }

    #[test]
    fn rmsnorm_constant_vector_is_unit() {
        let x = vec![3.5f64; 8];
        let y = rmsnorm(&x, &[1.0; 8], 1e-300);
        assert!(y.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn rmsnorm_zero_vector() {
        let y = rmsnorm(&[0.0f64; 5], &[2.0; 5], 1e-6);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rmsnorm_matches_reference() {
        let x: Vec<f64> = (0..17).map(|i| ((i * 7) as f64 * 0.31).sin() * 3.0).collect();
        let g: Vec<f64> = (0..17).map(|i| 0.5 + (i as f64 * 0.13).cos()).collect();
        let got = rmsnorm(&x, &g, 1e-6);
        let want = reference_rmsnorm(&x, &g, 1e-6);
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn swiglu_zero_input() {
        let wg = Tensor::<f64>::filled(&[4, 6], 0.3);
        let wu = Tensor::<f64>::filled(&[4, 6], -0.2);
        let wd = Tensor::<f64>::filled(&[6, 4], 0.7);
        assert!(swiglu_ffn(&[0.0; 4], &wg, &wu, &wd).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swiglu_scalar_case() {
        let one = Tensor::<f64>::filled(&[1, 1], 1.0);
        let y = swiglu_ffn(&[1.0], &one, &one, &one);
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((y[0] - want).abs() < 1e-15);
        assert!((y[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn swish_grad_matches_difference() {
        for z in [-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (swish(z + h) - swish(z - h)) / (2.0 * h);
            assert!((fd - swish_grad(z)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut row = vec![1.0f32, 2.0, -3.0, 0.5];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let lse = log_sum_exp(&[0.0f64; 10]);
        assert!((lse - 10f64.ln()).abs() < 1e-15);
    }
}
