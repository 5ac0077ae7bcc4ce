//! Llama-style decoder-only transformer with hand-written backward pass.
//!
//! Pre-norm residual blocks: RMSNorm, causal multi-head attention with rotary
//! positions, RMSNorm, gated SiLU MLP; then a final RMSNorm and an untied
//! output head. Matrices are stored row-major as `[in x out]` so a row vector
//! `x` maps to `x * W`.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for numerical checks.

mod backward;
mod forward;
mod generate;
pub mod ops;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{backward, backward_scaled, LossAndGrads};
pub use forward::{cross_entropy_loss, forward, forward_traced, ForwardTrace, Logits};
pub use generate::{argmax, greedy_generate};

pub const INIT_STD: f64 = 0.02;

pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Send + Sync + Sum + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub hidden_dim: usize,
}

/// Gated-MLP width: `8 * dim / 3` rounded up to a multiple of 16.
pub fn default_hidden_dim(dim: usize) -> usize {
    let raw = (8 * dim).div_ceil(3);
    raw.div_ceil(16) * 16
}

impl ModelConfig {
    pub fn new(vocab_size: usize, dim: usize, n_layers: usize, n_heads: usize, context_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            dim,
            n_layers,
            n_heads,
            context_len,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
            hidden_dim: default_hidden_dim(dim),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.dim == 0 || self.n_heads == 0 || self.n_layers == 0 || self.hidden_dim == 0 {
            return fail("dim, n_heads, n_layers and hidden_dim must be positive".into());
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return fail("dim not divisible by n_heads".into());
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!("head_dim {} must be even for rotary pairing", self.head_dim()));
        }
        if self.context_len < 2 {
            return fail(format!("context_len must be >= 2, got {}", self.context_len));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps >= 0.0) {
            return fail("rope_theta must be positive and norm_eps non-negative".into());
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let d = self.dim;
        let per_layer = 2 * d + 4 * d * d + 3 * d * self.hidden_dim;
        2 * self.vocab_size * d + d + self.n_layers * per_layer
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::of(x.f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub mlp_norm: Tensor<F>,
    pub w_gate: Tensor<F>,
    pub w_up: Tensor<F>,
    pub w_down: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F = f32> {
    pub config: ModelConfig,
    pub embedding: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Tensor<F>,
    pub output: Tensor<F>,
}

/// Gradients share the parameter layout.
pub type Gradients<F = f32> = ModelParams<F>;

/// Norm weights are identified by this suffix (and skip weight decay).
pub fn is_norm_tensor(name: &str) -> bool {
    name.ends_with("norm")
}

impl<F: Real> ModelParams<F> {
    /// Parameters with every tensor zero, including norm weights.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.dim;
        let h = config.hidden_dim;
        let layer = || LayerParams {
            attn_norm: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            mlp_norm: Tensor::zeros(&[d]),
            w_gate: Tensor::zeros(&[d, h]),
            w_up: Tensor::zeros(&[d, h]),
            w_down: Tensor::zeros(&[h, d]),
        };
        ModelParams {
            config: config.clone(),
            embedding: Tensor::zeros(&[config.vocab_size, d]),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            final_norm: Tensor::zeros(&[d]),
            output: Tensor::zeros(&[d, config.vocab_size]),
        }
    }

    /// Tensors in canonical order with their manifest names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("tok_embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("mlp_norm", &l.mlp_norm),
                ("w_gate", &l.w_gate),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("output".to_string(), &self.output));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.embedding];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.output);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(&self.config);
        for ((_, src), dst) in self.named_tensors().into_iter().zip(out.tensors_mut()) {
            *dst = src.cast();
        }
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams<F>, scale: F) {
        for ((_, src), dst) in other.named_tensors().into_iter().zip(self.tensors_mut()) {
            for (d, &s) in dst.data.iter_mut().zip(&src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Euclidean norm over all coordinates, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Seeded initialization: weights ~ N(0, 0.02^2), norm weights 1.
pub fn init_model<F: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    init_model_with_std(config, seed, INIT_STD)
}

pub fn init_model_with_std<F: Real>(config: &ModelConfig, seed: u64, std: f64) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut params = ModelParams::<F>::zeros(config);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if is_norm_tensor(name) {
            t.data.iter_mut().for_each(|x| *x = F::one());
        } else {
            t.data.iter_mut().for_each(|x| *x = F::of(normal.sample(&mut rng)));
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_dim_rounding() {
        assert_eq!(default_hidden_dim(8), 32);
        assert_eq!(default_hidden_dim(48), 128);
        assert_eq!(default_hidden_dim(64), 176);
        assert_eq!(default_hidden_dim(4096), 10928);
    }

    #[test]
    fn init_is_deterministic_with_unit_norms() {
        let cfg = ModelConfig::new(16, 8, 2, 2, 8);
        let a = init_model::<f32>(&cfg, 3).unwrap();
        let b = init_model::<f32>(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model::<f32>(&cfg, 4).unwrap());
        for (name, t) in a.named_tensors() {
            if is_norm_tensor(&name) {
                assert!(t.data.iter().all(|&x| x == 1.0), "{name}");
            }
        }
        assert_eq!(a.num_params(), cfg.num_params());
    }

    #[test]
    fn invalid_head_split_rejected() {
        let cfg = ModelConfig::new(16, 8, 1, 3, 8);
        let err = init_model::<f32>(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("dim not divisible by n_heads"), "{err}");
        // dim 6 over 2 heads gives an odd head_dim.
        assert!(init_model::<f32>(&ModelConfig::new(16, 6, 1, 2, 8), 0).is_err());
    }
}
