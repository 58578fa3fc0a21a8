use crate::model::kernels::{swish, swish_grad};
use crate::model::{Model, Tape, Weights};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Float};

/// Backward pass for an RMSNorm row batch. Adds the gain gradient into `dgain` and
/// the input gradient into `dx`.
fn rmsnorm_backward<T: Float>(x: &[T], gain: &[T], inv_rms: &[T], dy: &[T], dx: &mut [T], dgain: &mut [T]) {
    let h = gain.len();
    let inv_h = T::one() / T::c(h as f64);
    for (t, &r) in inv_rms.iter().enumerate() {
        let xs = &x[t * h..(t + 1) * h];
        let dys = &dy[t * h..(t + 1) * h];
        let mut proj = T::zero();
        for j in 0..h {
            dgain[j] += dys[j] * xs[j] * r;
            proj += dys[j] * gain[j] * xs[j];
        }
        let coef = r * r * r * proj * inv_h;
        for j in 0..h {
            dx[t * h + j] += r * dys[j] * gain[j] - coef * xs[j];
        }
    }
}

fn bias_backward<T: Float>(d: &[T], db: &mut [T]) {
    for row in d.chunks_exact(db.len()) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Accumulates parameter gradients for one sequence into `grads`, given the
/// gradient of the loss with respect to the logits (`[n, vocab]`).
pub(crate) fn backward<T: Float>(model: &Model<T>, tape: &Tape<T>, dlogits: &[T], grads: &mut Weights<T>) {
    let cfg = &model.cfg;
    let w = &model.weights;
    let n = tape.ids.len();
    let (h, f, v) = (cfg.hidden, cfg.ffn_hidden, cfg.vocab_size);
    let (heads, hd) = (cfg.n_heads, cfg.head_dim());
    let inv_sqrt_d = T::one() / T::c(hd as f64).sqrt();

    let mut dh = vec![T::zero(); n * h];
    match (&w.output, grads.output.as_mut()) {
        (Some(out), Some(g_out)) => {
            matmul_tn(&tape.h_final, dlogits, g_out.data_mut(), h, n, v, true);
            matmul_nt(dlogits, out.data(), &mut dh, n, v, h, false);
        }
        _ => {
            matmul_tn(dlogits, &tape.h_final, grads.embedding.data_mut(), v, n, h, true);
            matmul(dlogits, w.embedding.data(), &mut dh, n, v, h, false);
        }
    }

    // Gradient with respect to the residual stream.
    let mut dx = vec![T::zero(); n * h];
    rmsnorm_backward(
        &tape.x_final,
        w.final_norm.data(),
        &tape.inv_rms_final,
        &dh,
        &mut dx,
        grads.final_norm.data_mut(),
    );

    let mut d_branch = vec![T::zero(); n * h];
    let mut d_act = vec![T::zero(); n * f];
    let mut d_gate = vec![T::zero(); n * f];
    let mut d_up = vec![T::zero(); n * f];
    let mut dq = vec![T::zero(); n * h];
    let mut dk = vec![T::zero(); n * h];
    let mut dv = vec![T::zero(); n * h];
    let mut dctx = vec![T::zero(); n * h];
    let mut dp = vec![T::zero(); n * n];

    for (li, lt) in tape.layers.iter().enumerate().rev() {
        let lw = &w.layers[li];
        let lg = &mut grads.layers[li];

        // Feed-forward branch.
        d_branch.copy_from_slice(&dx);
        if let Some(m) = &lt.ffn_drop {
            d_branch.iter_mut().zip(m).for_each(|(a, &s)| *a *= s);
        }
        matmul_tn(&lt.act, &d_branch, lg.w_down.data_mut(), f, n, h, true);
        matmul_nt(&d_branch, lw.w_down.data(), &mut d_act, n, h, f, false);
        for i in 0..n * f {
            let g = lt.gate[i];
            d_gate[i] = d_act[i] * lt.up[i] * swish_grad(g);
            d_up[i] = d_act[i] * swish(g);
        }
        matmul_tn(&lt.h2, &d_gate, lg.w_gate.data_mut(), h, n, f, true);
        matmul_tn(&lt.h2, &d_up, lg.w_up.data_mut(), h, n, f, true);
        let mut dh2 = vec![T::zero(); n * h];
        matmul_nt(&d_gate, lw.w_gate.data(), &mut dh2, n, f, h, false);
        matmul_nt(&d_up, lw.w_up.data(), &mut dh2, n, f, h, true);
        rmsnorm_backward(
            &lt.x_mid,
            lw.ffn_norm.data(),
            &lt.inv_rms2,
            &dh2,
            &mut dx,
            lg.ffn_norm.data_mut(),
        );

        // Attention branch.
        d_branch.copy_from_slice(&dx);
        if let Some(m) = &lt.attn_drop {
            d_branch.iter_mut().zip(m).for_each(|(a, &s)| *a *= s);
        }
        matmul_tn(&lt.ctx, &d_branch, lg.wo.data_mut(), h, n, h, true);
        matmul_nt(&d_branch, lw.wo.data(), &mut dctx, n, h, h, false);

        for head in 0..heads {
            let off = head * hd;
            let p = &lt.probs[head * n * n..(head + 1) * n * n];
            // dP = dctx_h · V_hᵀ
            T::gemm(
                n,
                hd,
                n,
                T::one(),
                &dctx[off..],
                h,
                1,
                &lt.v[off..],
                1,
                h,
                T::zero(),
                &mut dp,
                n,
                1,
            );
            // dV_h = Pᵀ · dctx_h
            T::gemm(
                n,
                n,
                hd,
                T::one(),
                p,
                1,
                n,
                &dctx[off..],
                h,
                1,
                T::zero(),
                &mut dv[off..],
                h,
                1,
            );
            // Softmax backward, then through the logit scaling.
            for t in 0..n {
                let pr = &p[t * n..(t + 1) * n];
                let dr = &mut dp[t * n..(t + 1) * n];
                let inner: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                let scale = T::c(tape.plan.logit_scale(t)) * inv_sqrt_d;
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - inner) * scale;
                }
            }
            // dQ_h = dZ · K_h, dK_h = dZᵀ · Q_h
            T::gemm(
                n,
                n,
                hd,
                T::one(),
                &dp,
                n,
                1,
                &lt.k[off..],
                h,
                1,
                T::zero(),
                &mut dq[off..],
                h,
                1,
            );
            T::gemm(
                n,
                n,
                hd,
                T::one(),
                &dp,
                1,
                n,
                &lt.q[off..],
                h,
                1,
                T::zero(),
                &mut dk[off..],
                h,
                1,
            );
        }
        tape.angles.rotate(&mut dq, h, true);
        tape.angles.rotate(&mut dk, h, true);

        bias_backward(&dq, lg.bq.data_mut());
        bias_backward(&dk, lg.bk.data_mut());
        bias_backward(&dv, lg.bv.data_mut());
        matmul_tn(&lt.h1, &dq, lg.wq.data_mut(), h, n, h, true);
        matmul_tn(&lt.h1, &dk, lg.wk.data_mut(), h, n, h, true);
        matmul_tn(&lt.h1, &dv, lg.wv.data_mut(), h, n, h, true);
        let mut dh1 = vec![T::zero(); n * h];
        matmul_nt(&dq, lw.wq.data(), &mut dh1, n, h, h, false);
        matmul_nt(&dk, lw.wk.data(), &mut dh1, n, h, h, true);
        matmul_nt(&dv, lw.wv.data(), &mut dh1, n, h, h, true);
        rmsnorm_backward(
            &lt.x_in,
            lw.attn_norm.data(),
            &lt.inv_rms1,
            &dh1,
            &mut dx,
            lg.attn_norm.data_mut(),
        );
    }

    for (t, &id) in tape.ids.iter().enumerate() {
        let row = grads.embedding.row_mut(id as usize);
        for (g, &d) in row.iter_mut().zip(&dx[t * h..(t + 1) * h]) {
            *g += d;
        }
    }
}
