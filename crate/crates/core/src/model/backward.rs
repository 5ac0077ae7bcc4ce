use super::forward::{cross_entropy_loss, forward_traced};
use super::ops::{self, matmul_nt, matmul_tn_acc};
use super::{Gradients, ModelParams, Real};
use crate::error::Result;
use crate::tokenizer::{TokenId, PAD};

#[derive(Debug, Clone)]
pub struct LossAndGrads<F> {
    /// Unscaled mean cross-entropy over unmasked positions.
    pub loss: f64,
    pub grads: Gradients<F>,
}

/// Exact gradient of [`cross_entropy_loss`] with respect to every parameter.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    tokens: &[TokenId],
    targets: &[TokenId],
) -> Result<LossAndGrads<F>> {
    backward_scaled(params, tokens, targets, 1.0)
}

/// Gradient of `loss_scale * loss`.
pub fn backward_scaled<F: Real>(
    params: &ModelParams<F>,
    tokens: &[TokenId],
    targets: &[TokenId],
    loss_scale: f64,
) -> Result<LossAndGrads<F>> {
    let trace = forward_traced(params, tokens)?;
    let loss = cross_entropy_loss(&trace.logits, targets)?;
    let cfg = &params.config;
    let (t, d, hid, v) = (tokens.len(), cfg.dim, cfg.hidden_dim, cfg.vocab_size);
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let mut grads = ModelParams::<F>::zeros(cfg);

    // d loss / d logits = (softmax - onehot) / count on unmasked rows.
    let count = targets.iter().filter(|&&x| x != PAD).count() as f64;
    let mut dlogits = vec![F::zero(); t * v];
    for (i, &tgt) in targets.iter().enumerate() {
        if tgt == PAD {
            continue;
        }
        let row = trace.logits.row(i);
        let lse = ops::log_sum_exp(row);
        let w = loss_scale / count;
        for (j, (dl, &l)) in dlogits[i * v..(i + 1) * v].iter_mut().zip(row).enumerate() {
            let p = (l.f64() - lse).exp();
            let onehot = if j == tgt as usize { 1.0 } else { 0.0 };
            *dl = F::of((p - onehot) * w);
        }
    }

    matmul_tn_acc(&mut grads.output.data, &trace.normed_final, &dlogits, t, d, v);
    let dnorm = matmul_nt(&dlogits, t, v, &params.output.data, d);
    let mut dx = Vec::with_capacity(t * d);
    for i in 0..t {
        dx.extend(ops::rmsnorm_backward_row(
            &trace.x_final[i * d..(i + 1) * d],
            &params.final_norm.data,
            trace.r_final[i],
            &dnorm[i * d..(i + 1) * d],
            &mut grads.final_norm.data,
        ));
    }

    for (li, cache) in trace.layers.iter().enumerate().rev() {
        let lp = &params.layers[li];
        let gl = &mut grads.layers[li];

        // Gated MLP: x += down(silu(gate(b)) * up(b)).
        matmul_tn_acc(&mut gl.w_down.data, &cache.hidden, &dx, t, hid, d);
        let dhidden = matmul_nt(&dx, t, d, &lp.w_down.data, hid);
        let mut dgate = vec![F::zero(); t * hid];
        let mut dup = vec![F::zero(); t * hid];
        for idx in 0..t * hid {
            let g = cache.gate[idx];
            dgate[idx] = dhidden[idx] * cache.up[idx] * ops::silu_grad(g);
            dup[idx] = dhidden[idx] * ops::silu(g);
        }
        matmul_tn_acc(&mut gl.w_gate.data, &cache.b, &dgate, t, d, hid);
        matmul_tn_acc(&mut gl.w_up.data, &cache.b, &dup, t, d, hid);
        let mut db = matmul_nt(&dgate, t, hid, &lp.w_gate.data, d);
        for (a, b) in db.iter_mut().zip(matmul_nt(&dup, t, hid, &lp.w_up.data, d)) {
            *a += b;
        }
        for i in 0..t {
            let dxi = ops::rmsnorm_backward_row(
                &cache.x_mid[i * d..(i + 1) * d],
                &lp.mlp_norm.data,
                cache.r_mlp[i],
                &db[i * d..(i + 1) * d],
                &mut gl.mlp_norm.data,
            );
            for (a, b) in dx[i * d..(i + 1) * d].iter_mut().zip(dxi) {
                *a += b;
            }
        }

        // Attention: x += wo(attn(rope(q), rope(k), v)).
        matmul_tn_acc(&mut gl.wo.data, &cache.attn, &dx, t, d, d);
        let dattn = matmul_nt(&dx, t, d, &lp.wo.data, d);
        let mut dq = vec![F::zero(); t * d];
        let mut dk = vec![F::zero(); t * d];
        let mut dv = vec![F::zero(); t * d];
        let mut dscore = vec![F::zero(); t];
        for h in 0..n_heads {
            let off = h * hd;
            for i in 0..t {
                let probs = &cache.probs[h * t * t + i * t..h * t * t + i * t + i + 1];
                let da_i = &dattn[i * d + off..i * d + off + hd];
                let mut weighted = F::zero();
                for (j, &p) in probs.iter().enumerate() {
                    let dp = ops::dot(da_i, &cache.v[j * d + off..j * d + off + hd]);
                    dscore[j] = dp;
                    weighted += p * dp;
                    for (g, &a) in dv[j * d + off..j * d + off + hd].iter_mut().zip(da_i) {
                        *g += p * a;
                    }
                }
                for (j, &p) in probs.iter().enumerate() {
                    let ds = p * (dscore[j] - weighted) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    for c in 0..hd {
                        dq[i * d + off + c] += ds * cache.k[j * d + off + c];
                        dk[j * d + off + c] += ds * cache.q[i * d + off + c];
                    }
                }
            }
        }
        for i in 0..t {
            for h in 0..n_heads {
                let span = i * d + h * hd..i * d + (h + 1) * hd;
                trace.rope.rotate_back(&mut dq[span.clone()], i);
                trace.rope.rotate_back(&mut dk[span], i);
            }
        }
        matmul_tn_acc(&mut gl.wq.data, &cache.a, &dq, t, d, d);
        matmul_tn_acc(&mut gl.wk.data, &cache.a, &dk, t, d, d);
        matmul_tn_acc(&mut gl.wv.data, &cache.a, &dv, t, d, d);
        let mut da = matmul_nt(&dq, t, d, &lp.wq.data, d);
        for (src, w) in [(&dk, &lp.wk), (&dv, &lp.wv)] {
            for (a, b) in da.iter_mut().zip(matmul_nt(src, t, d, &w.data, d)) {
                *a += b;
            }
        }
        for i in 0..t {
            let dxi = ops::rmsnorm_backward_row(
                &cache.x_in[i * d..(i + 1) * d],
                &lp.attn_norm.data,
                cache.r_attn[i],
                &da[i * d..(i + 1) * d],
                &mut gl.attn_norm.data,
            );
            for (a, b) in dx[i * d..(i + 1) * d].iter_mut().zip(dxi) {
                *a += b;
            }
        }
    }

    for (i, &tok) in tokens.iter().enumerate() {
        let row = tok as usize * d;
        for (g, &x) in grads.embedding.data[row..row + d].iter_mut().zip(&dx[i * d..(i + 1) * d]) {
            *g += x;
        }
    }

    Ok(LossAndGrads { loss, grads })
}
