use std::ops::Range;

use crate::tensor::Float;

/// Additive logit applied to disallowed entries. Finite so that fp32 softmax never
/// sees `-inf - -inf`.
pub const MASK_NEG: f64 = -1e9;

/// Causal mask, optionally restricted to the `window` most recent positions
/// (a query at `t` sees keys `max(0, t-w+1)..=t`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionMask {
    pub window: Option<usize>,
}

impl AttentionMask {
    pub fn causal() -> Self {
        Self { window: None }
    }

    pub fn windowed(window: usize) -> Self {
        assert!(window >= 1, "window must be at least 1");
        Self { window: Some(window) }
    }

    /// Keys visible to the query at absolute position `q`.
    pub fn key_range(&self, q: usize) -> Range<usize> {
        let lo = match self.window {
            Some(w) => (q + 1).saturating_sub(w),
            None => 0,
        };
        lo..q + 1
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.key_range(q).contains(&k)
    }

    /// Row-major `[seq_len, seq_len]` visibility matrix.
    pub fn dense(&self, seq_len: usize) -> Vec<bool> {
        (0..seq_len)
            .flat_map(|q| (0..seq_len).map(move |k| (q, k)))
            .map(|(q, k)| self.allows(q, k))
            .collect()
    }
}

/// Strided view of one head inside a `[rows, row_stride]` buffer.
#[derive(Clone, Copy)]
pub(crate) struct HeadView<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub stride: usize,
}

impl<T> HeadView<'_, T> {
    fn slice(&self) -> &[T] {
        &self.data[self.offset..]
    }
}

/// One head of masked softmax attention.
///
/// `q` has `n` rows at absolute positions `q_start..q_start+n`; `k`/`v` have `m` rows at
/// positions `0..m`. `row_scale` multiplies each query's logits. Writes the
/// `[n, m]` probabilities into `probs` and the context rows into `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_head<T: Float>(
    q: HeadView<'_, T>,
    k: HeadView<'_, T>,
    v: HeadView<'_, T>,
    n: usize,
    m: usize,
    d: usize,
    q_start: usize,
    mask: &AttentionMask,
    row_scale: &dyn Fn(usize) -> T,
    probs: &mut [T],
    out: &mut [T],
    out_offset: usize,
    out_stride: usize,
) {
    let inv_sqrt_d = T::one() / T::c(d as f64).sqrt();
    T::gemm(
        n,
        d,
        m,
        inv_sqrt_d,
        q.slice(),
        q.stride,
        1,
        k.slice(),
        1,
        k.stride,
        T::zero(),
        probs,
        m,
        1,
    );
    let neg = T::c(MASK_NEG);
    for (i, row) in probs.chunks_exact_mut(m).enumerate() {
        let pos = q_start + i;
        let scale = row_scale(pos);
        let visible = mask.key_range(pos);
        let visible = visible.start.min(m)..visible.end.min(m);
        if visible.is_empty() {
            row.iter_mut().for_each(|p| *p = T::zero());
            continue;
        }
        for (j, s) in row.iter_mut().enumerate() {
            *s *= scale;
            if !visible.contains(&j) {
                *s += neg;
            }
        }
        super::kernels::softmax_in_place(row);
    }
    T::gemm(
        n,
        m,
        d,
        T::one(),
        probs,
        m,
        1,
        v.slice(),
        v.stride,
        1,
        T::zero(),
        &mut out[out_offset..],
        out_stride,
        1,
    );
}

/// `softmax((logit_scale·q)·kᵀ/sqrt(d) + mask) · v` for a single head.
///
/// `q` is `[n, d]` with its first row at absolute position `q_start`; `k` and `v` are
/// `[m, d]` covering positions `0..m`. A query with no visible key yields a zero row.
pub fn attention<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    q_start: usize,
    mask: &AttentionMask,
    logit_scale: T,
) -> Vec<T> {
    let (n, m) = (q.len() / d, k.len() / d);
    assert_eq!(v.len(), m * d, "k and v disagree");
    let mut probs = vec![T::zero(); n * m];
    let mut out = vec![T::zero(); n * d];
    attend_head(
        HeadView {
            data: q,
            offset: 0,
            stride: d,
        },
        HeadView {
            data: k,
            offset: 0,
            stride: d,
        },
        HeadView {
            data: v,
            offset: 0,
            stride: d,
        },
        n,
        m,
        d,
        q_start,
        mask,
        &|_| logit_scale,
        &mut probs,
        &mut out,
        0,
        d,
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_position_returns_value() {
        let out = attention(
            &[0.3f64, -1.0],
            &[2.0, 0.5],
            &[7.0, -4.0],
            2,
            0,
            &AttentionMask::causal(),
            1.0,
        );
        assert_eq!(out, vec![7.0, -4.0]);
    }

    #[test]
    fn two_positions_scalar_oracle() {
        // head_dim 1: q = (1, 2), k = (2, -1), v = (3, 5).
        let (q, k, v) = ([1.0f64, 2.0], [2.0f64, -1.0], [3.0f64, 5.0]);
        let out = attention(&q, &k, &v, 1, 0, &AttentionMask::causal(), 1.0);
        // Row 0 sees only key 0.
        assert!((out[0] - 3.0).abs() < 1e-12);
        // Row 1: logits 2*2 = 4 and 2*(-1) = -2.
        let (a, b) = (4.0f64.exp(), (-2.0f64).exp());
        let want = (a * 3.0 + b * 5.0) / (a + b);
        assert!((out[1] - want).abs() < 1e-12);
    }

    #[test]
    fn logit_scale_sharpens() {
        let (q, k, v) = ([1.0f64, 2.0], [2.0f64, -1.0], [3.0f64, 5.0]);
        let out = attention(&q, &k, &v, 1, 0, &AttentionMask::causal(), 1.5);
        let (a, b) = (6.0f64.exp(), (-3.0f64).exp());
        assert!((out[1] - (a * 3.0 + b * 5.0) / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn window_mask_rows() {
        let mask = AttentionMask::windowed(2);
        let dense = mask.dense(5);
        let row3: Vec<usize> = (0..5).filter(|&k| dense[3 * 5 + k]).collect();
        assert_eq!(row3, vec![2, 3]);
        let one = AttentionMask::windowed(1);
        assert!((0..6).all(|q| one.key_range(q) == (q..q + 1)));
        assert_eq!(AttentionMask::windowed(5).dense(5), AttentionMask::causal().dense(5));
    }

    #[test]
    fn wide_window_equals_causal() {
        let d = 4;
        let q: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..24).map(|i| (i as f64 * 0.91).cos()).collect();
        let v: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
        let a = attention(&q, &k, &v, d, 0, &AttentionMask::causal(), 1.0);
        let b = attention(&q, &k, &v, d, 0, &AttentionMask::windowed(6), 1.0);
        let c = attention(&q, &k, &v, d, 0, &AttentionMask::windowed(100), 1.0);
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10);
        assert_eq!(a, c);
    }

    #[test]
    fn rows_are_normalized() {
        let d = 2;
        let n = 6;
        let q: Vec<f32> = (0..n * d).map(|i| (i as f32 * 1.3).sin() * 4.0).collect();
        let k: Vec<f32> = (0..n * d).map(|i| (i as f32 * 0.7).cos() * 4.0).collect();
        let mut probs = vec![0.0f32; n * n];
        let mut out = vec![0.0f32; n * d];
        attend_head(
            HeadView {
                data: &q,
                offset: 0,
                stride: d,
            },
            HeadView {
                data: &k,
                offset: 0,
                stride: d,
            },
            HeadView {
                data: &k,
                offset: 0,
                stride: d,
            },
            n,
            n,
            d,
            0,
            &AttentionMask::windowed(3),
            &|_| 1.0,
            &mut probs,
            &mut out,
            0,
            d,
        );
        for (i, row) in probs.chunks(n).enumerate() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            for (j, &p) in row.iter().enumerate() {
                if j > i || j + 3 <= i {
                    assert_eq!(p, 0.0);
                }
            }
        }
    }
}
