//! Pretraining and instruction fine-tuning.
//!
//! One optimizer step consumes `per_device_batch * grad_accum_steps`
//! sequences. Per-sequence gradients are computed in parallel and summed in
//! sequence order, so a run is bit-reproducible for a fixed seed and input.

mod checkpoint;
mod optim;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{format_instruction, InstructionExample, TokenBlock};
use crate::error::{Error, Result};
use crate::model::{backward, init_model, Gradients, ModelConfig, ModelParams};
use crate::par;
use crate::tokenizer::{TokenId, Tokenizer, EOS, PAD};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Phase};
pub use optim::{adamw_step, lr_at, warmup_steps, OptimizerState};

/// Learning rate used for instruction fine-tuning.
pub const FINETUNE_PEAK_LR: f64 = 0.00001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub per_device_batch: usize,
    pub grad_accum_steps: usize,
    pub seed: u64,
    pub checkpoint_fractions: Vec<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
}

/// Checkpoint every 10% of the run.
pub fn default_fractions() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::llama2_7b()
    }
}

impl TrainConfig {
    /// Hyperparameters of the 7B run.
    pub fn llama2_7b() -> Self {
        TrainConfig {
            epochs: 1,
            peak_lr: 0.0002,
            warmup_ratio: 0.05,
            weight_decay: 0.07,
            per_device_batch: 8,
            grad_accum_steps: 2,
            seed: 0,
            checkpoint_fractions: default_fractions(),
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
        }
    }

    /// Hyperparameters of the 13B run.
    pub fn llama2_13b() -> Self {
        TrainConfig {
            peak_lr: 0.00004,
            weight_decay: 0.05,
            per_device_batch: 4,
            grad_accum_steps: 4,
            ..TrainConfig::llama2_7b()
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.per_device_batch * self.grad_accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail("peak_lr must be positive");
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return fail("warmup_ratio must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if self.per_device_batch == 0 || self.grad_accum_steps == 0 {
            return fail("per_device_batch and grad_accum_steps must be >= 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip_norm > 0.0) {
            return fail("adam_eps and grad_clip_norm must be positive");
        }
        let fr = &self.checkpoint_fractions;
        if fr.iter().any(|&f| !(f > 0.0 && f <= 1.0)) || fr.windows(2).any(|w| w[0] >= w[1]) {
            return fail("checkpoint_fractions must be strictly increasing in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub points: Vec<LossPoint>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.step, p.loss, p.lr));
        }
        out
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.points.first().map(|p| p.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.loss)
    }
}

/// One training sequence with its per-position targets (PAD = masked).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

impl Example {
    /// Next-token prediction over a packed block; the last position has no
    /// target inside the block and is masked.
    pub fn from_block(block: &TokenBlock) -> Self {
        let mut targets = block.tokens[1..].to_vec();
        targets.push(PAD);
        Example {
            tokens: block.tokens.clone(),
            targets,
        }
    }
}

/// Mean loss and mean gradient over `batch`, summed micro-batch by
/// micro-batch of `per_device` sequences.
pub fn accumulate_gradients(
    params: &ModelParams,
    batch: &[Example],
    per_device: usize,
) -> Result<(f64, Gradients)> {
    let mut total = Gradients::zeros(&params.config);
    let mut loss = 0.0;
    for micro in batch.chunks(per_device.max(1)) {
        let results = par::map(micro, |ex| backward(params, &ex.tokens, &ex.targets));
        let mut micro_sum = Gradients::zeros(&params.config);
        for r in results {
            let r = r?;
            loss += r.loss;
            micro_sum.add_scaled(&r.grads, 1.0);
        }
        total.add_scaled(&micro_sum, 1.0);
    }
    let n = batch.len() as f32;
    total.scale(1.0 / n);
    Ok((loss / batch.len() as f64, total))
}

/// Rescale gradients whose global norm exceeds `max_norm`. Returns the
/// pre-clip norm.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}

/// Optimizer step at which the checkpoint for `fraction` is taken.
pub fn checkpoint_step(fraction: f64, total_steps: u64) -> u64 {
    ((fraction * total_steps as f64 - 1e-9).ceil().max(0.0) as u64).min(total_steps)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Checkpoints in order of increasing fraction, starting at 0.0.
    pub checkpoints: Vec<Checkpoint>,
    pub trace: LossTrace,
    /// Files written, when an output directory was given.
    pub paths: Vec<PathBuf>,
}

/// File name used for the checkpoint at `fraction`.
pub fn checkpoint_file_name(phase: Phase, fraction: f64) -> String {
    match phase {
        Phase::Pretrain => format!("ckpt-{fraction:.4}.rlml"),
        Phase::Finetune => "finetuned.rlml".to_string(),
    }
}

/// Pretrain a freshly initialized model (seeded by `tcfg.seed`) for the
/// configured number of epochs over `blocks`, in order.
pub fn pretrain(
    model_cfg: &ModelConfig,
    tcfg: &TrainConfig,
    blocks: &[TokenBlock],
    tokenizer_fingerprint: &str,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    let params = init_model::<f32>(model_cfg, tcfg.seed)?;
    pretrain_from(params, tcfg, blocks, tokenizer_fingerprint, out_dir)
}

/// Pretrain starting from existing parameters.
pub fn pretrain_from(
    params: ModelParams,
    tcfg: &TrainConfig,
    blocks: &[TokenBlock],
    tokenizer_fingerprint: &str,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    tcfg.validate()?;
    params.config.validate()?;
    let ctx = params.config.context_len;
    for (i, b) in blocks.iter().enumerate() {
        if b.tokens.len() != ctx {
            return Err(Error::Data(format!(
                "block {i} has {} tokens, expected {ctx}",
                b.tokens.len()
            )));
        }
    }
    let examples: Vec<Example> = blocks.iter().map(Example::from_block).collect();
    let mut run = Run::new(params, tcfg.clone(), Phase::Pretrain, tokenizer_fingerprint, out_dir);
    let result = run.train(&examples, &tcfg.checkpoint_fractions, true);
    run.finish(result)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
    pub used_examples: usize,
    pub skipped_examples: usize,
}

/// Render an instruction example for fine-tuning: BOS + prompt + response +
/// EOS, truncated to `context_len`, with targets only on response tokens.
/// An empty response leaves every target masked. Returns `None` when the
/// prompt alone fills the context.
pub fn instruction_example(
    tok: &Tokenizer,
    ex: &InstructionExample,
    context_len: usize,
) -> Option<Example> {
    let rendered = format_instruction(ex);
    let mut full = tok.encode_with_bos(rendered.prompt());
    let prompt_len = full.len();
    if prompt_len >= context_len {
        return None;
    }
    let response = tok.encode(rendered.response());
    let has_response = !response.is_empty();
    full.extend(response);
    full.push(EOS);
    let len = full.len().min(context_len);
    let targets = (0..len)
        .map(|i| match full.get(i + 1) {
            Some(&t) if has_response && i + 1 >= prompt_len => t,
            _ => PAD,
        })
        .collect();
    Some(Example {
        tokens: full[..len].to_vec(),
        targets,
    })
}

/// Instruction fine-tuning at the fixed fine-tuning learning rate.
pub fn finetune(
    base: &Checkpoint,
    tok: &Tokenizer,
    examples: &[InstructionExample],
    tcfg: &TrainConfig,
) -> Result<FinetuneOutput> {
    finetune_with_lr(base, tok, examples, tcfg, FINETUNE_PEAK_LR)
}

/// Instruction fine-tuning with an explicit peak learning rate; everything
/// else follows `tcfg`. The optimizer starts from scratch.
pub fn finetune_with_lr(
    base: &Checkpoint,
    tok: &Tokenizer,
    examples: &[InstructionExample],
    tcfg: &TrainConfig,
    peak_lr: f64,
) -> Result<FinetuneOutput> {
    if base.tokenizer_fingerprint != tok.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: base.tokenizer_fingerprint.clone(),
            found: tok.fingerprint().to_string(),
        });
    }
    if examples.is_empty() {
        return Err(Error::Data("no examples".into()));
    }
    let tcfg = TrainConfig {
        peak_lr,
        checkpoint_fractions: vec![1.0],
        ..tcfg.clone()
    };
    tcfg.validate()?;
    let ctx = base.params.config.context_len;
    let rendered: Vec<Example> = examples
        .iter()
        .filter_map(|ex| instruction_example(tok, ex, ctx))
        .filter(|ex| ex.targets.iter().any(|&t| t != PAD))
        .collect();
    let skipped = examples.len() - rendered.len();
    if skipped > 0 {
        log::warn!("skipped {skipped} instruction examples with no trainable response tokens");
    }
    let mut run = Run::new(
        base.params.clone(),
        tcfg.clone(),
        Phase::Finetune,
        &base.tokenizer_fingerprint,
        None,
    );
    run.skipped = skipped as u64;
    let result = run.train(&rendered, &[1.0], false);
    let out = run.finish(result)?;
    let checkpoint = out.checkpoints.into_iter().last().expect("final checkpoint");
    Ok(FinetuneOutput {
        checkpoint,
        trace: out.trace,
        used_examples: rendered.len(),
        skipped_examples: skipped,
    })
}

struct Run<'a> {
    params: ModelParams,
    tcfg: TrainConfig,
    phase: Phase,
    fingerprint: String,
    out_dir: Option<&'a Path>,
    skipped: u64,
    checkpoints: Vec<Checkpoint>,
    paths: Vec<PathBuf>,
    trace: LossTrace,
}

impl<'a> Run<'a> {
    fn new(params: ModelParams, tcfg: TrainConfig, phase: Phase, fingerprint: &str, out_dir: Option<&'a Path>) -> Self {
        Run {
            params,
            tcfg,
            phase,
            fingerprint: fingerprint.to_string(),
            out_dir,
            skipped: 0,
            checkpoints: Vec::new(),
            paths: Vec::new(),
            trace: LossTrace::default(),
        }
    }

    fn train(&mut self, examples: &[Example], fractions: &[f64], initial_checkpoint: bool) -> Result<()> {
        let eb = self.tcfg.effective_batch();
        let per_epoch = (examples.len() / eb) as u64;
        if per_epoch == 0 {
            return Err(Error::Data(format!(
                "insufficient data: {} sequences for an effective batch of {eb}",
                examples.len()
            )));
        }
        let total = per_epoch * self.tcfg.epochs as u64;
        let mut optimizer = OptimizerState::new(&self.params.config);
        if initial_checkpoint {
            self.checkpoint(0.0, 0, total, &optimizer)?;
        }
        let mut pending = fractions.iter().copied().peekable();
        let mut step = 0u64;
        for _epoch in 0..self.tcfg.epochs {
            for batch in examples.chunks_exact(eb) {
                step += 1;
                let lr = lr_at(step, total, &self.tcfg)?;
                let (loss, mut grads) = accumulate_gradients(&self.params, batch, self.tcfg.per_device_batch)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { step });
                }
                let norm = clip_global_norm(&mut grads, self.tcfg.grad_clip_norm);
                if !norm.is_finite() {
                    return Err(Error::Divergence { step });
                }
                adamw_step(&mut self.params, &grads, &mut optimizer, lr, &self.tcfg)?;
                self.trace.points.push(LossPoint { step, loss, lr });
                log::info!("{:?} step {step}/{total} loss {loss:.4} lr {lr:.3e}", self.phase);
                while let Some(&f) = pending.peek() {
                    if checkpoint_step(f, total) > step {
                        break;
                    }
                    pending.next();
                    self.checkpoint(f, step, total, &optimizer)?;
                }
            }
        }
        Ok(())
    }

    fn checkpoint(&mut self, fraction: f64, step: u64, total: u64, opt: &OptimizerState) -> Result<()> {
        let eb = self.tcfg.effective_batch() as u64;
        let ckpt = Checkpoint {
            model_config: self.params.config.clone(),
            train_config: self.tcfg.clone(),
            tokenizer_fingerprint: self.fingerprint.clone(),
            phase: self.phase,
            fraction,
            step,
            total_steps: total,
            tokens_seen: step * eb * self.params.config.context_len as u64,
            skipped_examples: self.skipped,
            params: self.params.clone(),
            optimizer: Some(opt.clone()),
        };
        if let Some(dir) = self.out_dir {
            let path = dir.join(checkpoint_file_name(self.phase, fraction));
            save_checkpoint(&ckpt, &path)?;
            self.paths.push(path);
        }
        self.checkpoints.push(ckpt);
        Ok(())
    }

    /// On failure, remove every checkpoint file this run wrote.
    fn finish(self, result: Result<()>) -> Result<TrainOutput> {
        match result {
            Ok(()) => Ok(TrainOutput {
                checkpoints: self.checkpoints,
                trace: self.trace,
                paths: self.paths,
            }),
            Err(e) => {
                for p in &self.paths {
                    let _ = std::fs::remove_file(p);
                }
                Err(e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_presets_validate() {
        TrainConfig::llama2_7b().validate().unwrap();
        TrainConfig::llama2_13b().validate().unwrap();
        assert_eq!(TrainConfig::llama2_7b().effective_batch(), 16);
        assert_eq!(TrainConfig::llama2_13b().effective_batch(), 16);
    }

    #[test]
    fn invalid_fractions_rejected() {
        let mut c = TrainConfig {
            checkpoint_fractions: vec![0.5, 0.5],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.checkpoint_fractions = vec![0.0, 0.5];
        assert!(c.validate().is_err());
        c.checkpoint_fractions = vec![0.5, 1.1];
        assert!(c.validate().is_err());
        c.checkpoint_fractions = vec![0.25, 1.0];
        c.warmup_ratio = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn checkpoint_steps_round_up() {
        let steps: Vec<u64> = default_fractions().iter().map(|&f| checkpoint_step(f, 35)).collect();
        assert_eq!(steps, vec![4, 7, 11, 14, 18, 21, 25, 28, 32, 35]);
        assert_eq!(checkpoint_step(0.1, 3), 1);
        assert_eq!(checkpoint_step(1.0, 100), 100);
    }

    #[test]
    fn instruction_targets_cover_only_the_response() {
        let tok = Tokenizer::byte_level();
        let ex = InstructionExample {
            instruction: "Q".into(),
            input: None,
            output: "ab".into(),
        };
        let e = instruction_example(&tok, &ex, 64).unwrap();
        let prompt_len = 1 + "### Instruction:\nQ\n\n### Response:\n".len();
        assert_eq!(e.tokens.len(), prompt_len + 3);
        let unmasked: Vec<usize> = (0..e.targets.len()).filter(|&i| e.targets[i] != PAD).collect();
        assert_eq!(unmasked, vec![prompt_len - 1, prompt_len, prompt_len + 1]);
        assert_eq!(e.targets[prompt_len + 1], EOS);
        // Prompt fills the context: skipped.
        assert!(instruction_example(&tok, &ex, prompt_len).is_none());
        // One slot left: the last kept position still predicts the next token.
        let e = instruction_example(&tok, &ex, prompt_len + 1).unwrap();
        assert_eq!(e.targets.iter().filter(|&&t| t != PAD).count(), 2);
        let empty = InstructionExample { output: String::new(), ..ex };
        let e = instruction_example(&tok, &empty, 64).unwrap();
        assert!(e.targets.iter().all(|&t| t == PAD));
    }
}
