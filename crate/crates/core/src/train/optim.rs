use std::f64::consts::PI;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{is_norm_tensor, Gradients, ModelConfig, ModelParams, Tensor};

/// Number of warmup steps: `round(warmup_ratio * total)`, at least one.
pub fn warmup_steps(total_steps: u64, warmup_ratio: f64) -> u64 {
    ((warmup_ratio * total_steps as f64).round() as u64).clamp(1, total_steps.max(1))
}

/// Learning rate for 1-based optimizer step `step` of `total_steps`: linear
/// warmup to `peak_lr`, then cosine decay to a floor of `0.1 * peak_lr`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be >= 1".into()));
    }
    let peak = cfg.peak_lr;
    let min = 0.1 * peak;
    let warm = warmup_steps(total_steps, cfg.warmup_ratio);
    let step = step.min(total_steps);
    if step <= warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    if total_steps == warm {
        return Ok(peak);
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    Ok(min + 0.5 * (peak - min) * (1.0 + (PI * progress).cos()))
}

/// AdamW moments, one pair per parameter tensor in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(cfg: &ModelConfig) -> Self {
        let zeros = ModelParams::<f32>::zeros(cfg);
        let tensors: Vec<Tensor<f32>> = zeros.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        OptimizerState {
            m: tensors.clone(),
            v: tensors,
            t: 0,
        }
    }
}

/// One AdamW update in place. Weight decay is decoupled and skipped for norm
/// weights. Non-finite gradients abort with [`Error::Divergence`].
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    if !grads.all_finite() {
        return Err(Error::Divergence { step: state.t });
    }
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let grad_tensors = grads.named_tensors();
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.tensors_mut().into_iter().enumerate() {
        let decay = if is_norm_tensor(&names[i]) { 0.0 } else { cfg.weight_decay };
        let g = &grad_tensors[i].1.data;
        let (m, v) = (&mut state.m[i].data, &mut state.v[i].data);
        for j in 0..p.data.len() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let mut w = p.data[j] as f64;
            w -= lr * decay * w;
            w -= lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            p.data[j] = w as f32;
        }
    }
    if !params.all_finite() {
        return Err(Error::Divergence { step: state.t });
    }
    Ok(())
}
