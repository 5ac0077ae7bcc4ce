use super::ops::{self, RopeTable};
use super::{ModelParams, Real};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, PAD};

/// Row-major `[seq_len x vocab_size]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub data: Vec<F>,
}

impl<F: Real> Logits<F> {
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    /// Natural-log probability of `token` at position `i`, in f64.
    pub fn log_prob(&self, i: usize, token: TokenId) -> f64 {
        let row = self.row(i);
        row[token as usize].f64() - ops::log_sum_exp(row)
    }
}

/// Activations of one block, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache<F> {
    pub x_in: Vec<F>,
    pub a: Vec<F>,
    pub r_attn: Vec<f64>,
    /// Queries and keys after rotation.
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// `[n_heads x seq x seq]`, zero above the diagonal.
    pub probs: Vec<F>,
    pub attn: Vec<F>,
    pub x_mid: Vec<F>,
    pub b: Vec<F>,
    pub r_mlp: Vec<f64>,
    pub gate: Vec<F>,
    pub up: Vec<F>,
    pub hidden: Vec<F>,
}

/// Full forward state: logits plus every intermediate needed for gradients.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub logits: Logits<F>,
    pub(crate) tokens: Vec<TokenId>,
    pub(crate) layers: Vec<LayerCache<F>>,
    pub(crate) x_final: Vec<F>,
    pub(crate) r_final: Vec<f64>,
    pub(crate) normed_final: Vec<F>,
    pub(crate) rope: RopeTable<F>,
}

impl<F: Real> ForwardTrace<F> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Attention probabilities of one head as a `[seq x seq]` matrix.
    pub fn attention_probs(&self, layer: usize, head: usize) -> &[F] {
        let t = self.seq_len();
        &self.layers[layer].probs[head * t * t..(head + 1) * t * t]
    }
}

pub(crate) fn check_tokens<F: Real>(params: &ModelParams<F>, tokens: &[TokenId]) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    if tokens.len() > cfg.context_len {
        return Err(Error::Data(format!(
            "sequence of {} tokens exceeds context length {}",
            tokens.len(),
            cfg.context_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} out of range for vocab size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub fn forward<F: Real>(params: &ModelParams<F>, tokens: &[TokenId]) -> Result<Logits<F>> {
    Ok(forward_traced(params, tokens)?.logits)
}

pub fn forward_traced<F: Real>(params: &ModelParams<F>, tokens: &[TokenId]) -> Result<ForwardTrace<F>> {
    check_tokens(params, tokens)?;
    let cfg = &params.config;
    let (t, d, hid, v) = (tokens.len(), cfg.dim, cfg.hidden_dim, cfg.vocab_size);
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let rope = RopeTable::<F>::new(hd, t, cfg.rope_theta);

    let mut x = Vec::with_capacity(t * d);
    for &tok in tokens {
        let row = tok as usize * d;
        x.extend_from_slice(&params.embedding.data[row..row + d]);
    }

    let mut caches = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let x_in = x.clone();
        let (a, r_attn) = norm_rows(&x, &layer.attn_norm.data, t, d, cfg.norm_eps);
        let mut q = ops::matmul(&a, t, d, &layer.wq.data, d);
        let mut k = ops::matmul(&a, t, d, &layer.wk.data, d);
        let vv = ops::matmul(&a, t, d, &layer.wv.data, d);
        for i in 0..t {
            for h in 0..n_heads {
                let span = i * d + h * hd..i * d + (h + 1) * hd;
                rope.rotate(&mut q[span.clone()], i);
                rope.rotate(&mut k[span], i);
            }
        }

        let mut probs = vec![F::zero(); n_heads * t * t];
        let mut attn = vec![F::zero(); t * d];
        for h in 0..n_heads {
            let off = h * hd;
            for i in 0..t {
                let qi = &q[i * d + off..i * d + off + hd];
                let row = &mut probs[h * t * t + i * t..h * t * t + i * t + i + 1];
                for (j, p) in row.iter_mut().enumerate() {
                    *p = ops::dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
                }
                ops::softmax_in_place(row);
                let out = &mut attn[i * d + off..i * d + off + hd];
                for (j, &p) in row.iter().enumerate() {
                    for (o, &vj) in out.iter_mut().zip(&vv[j * d + off..j * d + off + hd]) {
                        *o += p * vj;
                    }
                }
            }
        }
        let o = ops::matmul(&attn, t, d, &layer.wo.data, d);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += *oi;
        }
        let x_mid = x.clone();

        let (b, r_mlp) = norm_rows(&x, &layer.mlp_norm.data, t, d, cfg.norm_eps);
        let gate = ops::matmul(&b, t, d, &layer.w_gate.data, hid);
        let up = ops::matmul(&b, t, d, &layer.w_up.data, hid);
        let hidden: Vec<F> = gate.iter().zip(&up).map(|(&g, &u)| ops::silu(g) * u).collect();
        let m = ops::matmul(&hidden, t, hid, &layer.w_down.data, d);
        for (xi, mi) in x.iter_mut().zip(&m) {
            *xi += *mi;
        }

        caches.push(LayerCache {
            x_in,
            a,
            r_attn,
            q,
            k,
            v: vv,
            probs,
            attn,
            x_mid,
            b,
            r_mlp,
            gate,
            up,
            hidden,
        });
    }

    let (normed_final, r_final) = norm_rows(&x, &params.final_norm.data, t, d, cfg.norm_eps);
    let logits = ops::matmul(&normed_final, t, d, &params.output.data, v);
    Ok(ForwardTrace {
        logits: Logits {
            seq_len: t,
            vocab_size: v,
            data: logits,
        },
        tokens: tokens.to_vec(),
        layers: caches,
        x_final: x,
        r_final,
        normed_final,
        rope,
    })
}

fn norm_rows<F: Real>(x: &[F], w: &[F], t: usize, d: usize, eps: f64) -> (Vec<F>, Vec<f64>) {
    let mut out = Vec::with_capacity(t * d);
    let mut rs = Vec::with_capacity(t);
    for row in x.chunks_exact(d) {
        let r = ops::inv_rms(row, eps);
        let rf = F::of(r);
        out.extend(row.iter().zip(w).map(|(&xv, &wv)| wv * xv * rf));
        rs.push(r);
    }
    (out, rs)
}

/// Mean next-token cross-entropy over positions whose target is not PAD.
pub fn cross_entropy_loss<F: Real>(logits: &Logits<F>, targets: &[TokenId]) -> Result<f64> {
    if targets.len() != logits.seq_len {
        return Err(Error::Data(format!(
            "{} targets for {} positions",
            targets.len(),
            logits.seq_len
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &tgt) in targets.iter().enumerate() {
        if tgt == PAD {
            continue;
        }
        if tgt as usize >= logits.vocab_size {
            return Err(Error::Data(format!("target id {tgt} out of range")));
        }
        total -= logits.log_prob(i, tgt);
        count += 1;
    }
    if count == 0 {
        return Err(Error::AllMasked);
    }
    Ok(total / count as f64)
}
