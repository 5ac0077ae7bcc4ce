//! Row-wise numerical kernels shared by the forward and backward passes.
//!
//! Every kernel processes each output row independently of the others, which
//! is what makes causal masking exact bit for bit.

use super::Real;
use crate::error::{Error, Result};

/// `a[m x k] * b[k x n]`.
pub fn matmul<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `acc[k x n] += a[m x k]^T * dy[m x n]`.
pub fn matmul_tn_acc<F: Real>(acc: &mut [F], a: &[F], dy: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyi = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::zero() {
                continue;
            }
            for (o, &g) in acc[p * n..(p + 1) * n].iter_mut().zip(dyi) {
                *o += aip * g;
            }
        }
    }
}

/// `dy[m x n] * w[k x n]^T`, giving `m x k`.
pub fn matmul_nt<F: Real>(dy: &[F], m: usize, n: usize, w: &[F], k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let dyi = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(dyi, &w[p * n..(p + 1) * n]);
        }
    }
    out
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

/// Reciprocal root-mean-square with f64 accumulation.
pub fn inv_rms<F: Real>(x: &[F], eps: f64) -> f64 {
    let ms = x.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / x.len() as f64;
    1.0 / (ms + eps).sqrt()
}

/// `out_i = weight_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm<F: Real>(x: &[F], weight: &[F], eps: f64) -> Vec<F> {
    let r = F::of(inv_rms(x, eps));
    x.iter().zip(weight).map(|(&v, &w)| w * v * r).collect()
}

/// Backward of one RMSNorm row. Adds the weight gradient into `dweight` and
/// returns the input gradient.
pub(crate) fn rmsnorm_backward_row<F: Real>(
    x: &[F],
    weight: &[F],
    r: f64,
    dy: &[F],
    dweight: &mut [F],
) -> Vec<F> {
    let n = x.len() as f64;
    let rf = F::of(r);
    let mut proj = 0.0f64;
    for i in 0..x.len() {
        dweight[i] += dy[i] * x[i] * rf;
        proj += (dy[i] * weight[i]).f64() * x[i].f64();
    }
    let c = F::of(r * r * r * proj / n);
    (0..x.len())
        .map(|i| rf * weight[i] * dy[i] - c * x[i])
        .collect()
}

/// Cos/sin for each position and rotary pair.
#[derive(Debug, Clone)]
pub struct RopeTable<F> {
    pub half: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Real> RopeTable<F> {
    pub fn new(head_dim: usize, positions: usize, theta: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for pos in 0..positions {
            for j in 0..half {
                let angle = pos as f64 * rope_frequency(j, head_dim, theta);
                cos.push(F::of(angle.cos()));
                sin.push(F::of(angle.sin()));
            }
        }
        RopeTable { half, cos, sin }
    }

    /// Rotate pairs `(2j, 2j+1)` of one head vector in place.
    pub fn rotate(&self, v: &mut [F], pos: usize) {
        for j in 0..self.half {
            let (c, s) = (self.cos[pos * self.half + j], self.sin[pos * self.half + j]);
            let (a, b) = (v[2 * j], v[2 * j + 1]);
            v[2 * j] = a * c - b * s;
            v[2 * j + 1] = a * s + b * c;
        }
    }

    /// Transpose rotation, used to pull gradients back through [`rotate`].
    pub fn rotate_back(&self, v: &mut [F], pos: usize) {
        for j in 0..self.half {
            let (c, s) = (self.cos[pos * self.half + j], self.sin[pos * self.half + j]);
            let (a, b) = (v[2 * j], v[2 * j + 1]);
            v[2 * j] = a * c + b * s;
            v[2 * j + 1] = b * c - a * s;
        }
    }
}

/// Angular frequency of rotary pair `j`: `theta^(-2j / head_dim)`.
pub fn rope_frequency(j: usize, head_dim: usize, theta: f64) -> f64 {
    theta.powf(-2.0 * j as f64 / head_dim as f64)
}

/// Apply rotary embedding to a query/key pair of one head at `position`.
pub fn rope_apply<F: Real>(q: &[F], k: &[F], position: usize, theta: f64) -> Result<(Vec<F>, Vec<F>)> {
    if !q.len().is_multiple_of(2) || q.len() != k.len() {
        return Err(Error::Config(format!(
            "rotary head_dim must be even and equal for q and k (got {} and {})",
            q.len(),
            k.len()
        )));
    }
    let table = RopeTable::<F>::new(q.len(), position + 1, theta);
    let (mut q2, mut k2) = (q.to_vec(), k.to_vec());
    table.rotate(&mut q2, position);
    table.rotate(&mut k2, position);
    Ok((q2, k2))
}

/// Pre-softmax score of a single head: `rot(q, i) . rot(k, j) / sqrt(head_dim)`.
pub fn rotary_score<F: Real>(q: &[F], k: &[F], pos_q: usize, pos_k: usize, theta: f64) -> Result<F> {
    let (rq, _) = rope_apply(q, q, pos_q, theta)?;
    let (rk, _) = rope_apply(k, k, pos_k, theta)?;
    Ok(dot(&rq, &rk) / F::of((q.len() as f64).sqrt()))
}

/// In-place softmax with max subtraction; the normalizer is summed in f64.
pub fn softmax_in_place<F: Real>(xs: &mut [F]) {
    let max = xs.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut sum = 0.0f64;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += x.f64();
    }
    let inv = F::of(1.0 / sum);
    xs.iter_mut().for_each(|x| *x *= inv);
}

/// `log(sum(exp(row)))` in f64.
pub fn log_sum_exp<F: Real>(row: &[F]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
    let s: f64 = row.iter().map(|x| (x.f64() - max).exp()).sum();
    max + s.ln()
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}
