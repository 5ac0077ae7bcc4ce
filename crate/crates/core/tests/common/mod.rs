//! Fixtures and independent oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlml_core::model::{init_model_with_std, ModelConfig, ModelParams, Real};
use rlml_core::tokenizer::{TokenId, PAD};

/// Tiny config used by the gradient checks: dim 8, 2 layers, vocab 16.
pub fn grad_check_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(16, 8, 2, 2, 8);
    cfg.hidden_dim = 16;
    cfg
}

/// Random model with weights large enough that attention is far from uniform.
pub fn lively_model(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = init_model_with_std::<f64>(cfg, seed, 0.4).unwrap();
    // Non-unit norm weights so their gradients are exercised too.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for (name, t) in p
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect::<Vec<_>>()
        .into_iter()
        .zip(p.tensors_mut())
    {
        if name.ends_with("norm") {
            t.data.iter_mut().for_each(|x| *x = rng.random_range(0.5..1.5));
        }
    }
    p
}

pub fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    // Skip the special ids so no target is accidentally PAD.
    (0..len).map(|_| rng.random_range(4..vocab as u32)).collect()
}

/// Next-token targets for a block: shifted left with the last position masked.
pub fn shifted_targets(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut t: Vec<TokenId> = tokens[1..].to_vec();
    t.push(PAD);
    t
}

/// Mutable reference to coordinate `idx` of tensor `tensor` in canonical order.
pub fn coord<F: Real>(p: &mut ModelParams<F>, tensor: usize, idx: usize) -> &mut F {
    &mut p.tensors_mut().into_iter().nth(tensor).unwrap().data[idx]
}

/// Central finite difference of `f` along one parameter coordinate.
pub fn central_difference(
    params: &ModelParams<f64>,
    tensor: usize,
    idx: usize,
    h: f64,
    f: impl Fn(&ModelParams<f64>) -> f64,
) -> f64 {
    let mut plus = params.clone();
    *coord(&mut plus, tensor, idx) += h;
    let mut minus = params.clone();
    *coord(&mut minus, tensor, idx) -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with a small floor so exact zeros compare cleanly.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// A one-layer model that behaves like a bigram table: after token `a` it puts
/// logit `strength * sqrt(dim)` on `transitions[a]` (or on `fallback`) and 0
/// elsewhere. Attention and MLP weights are zero, embeddings are one-hot.
pub fn bigram_model(
    vocab: usize,
    context_len: usize,
    transitions: &HashMap<TokenId, TokenId>,
    fallback: Option<TokenId>,
    strength: f64,
) -> ModelParams<f64> {
    let dim = vocab + vocab % 2;
    let mut cfg = ModelConfig::new(vocab, dim, 1, 1, context_len);
    cfg.hidden_dim = 2;
    let mut p = ModelParams::<f64>::zeros(&cfg);
    for a in 0..vocab {
        p.embedding.data[a * dim + a] = 1.0;
    }
    p.layers[0].attn_norm.data.fill(1.0);
    p.layers[0].mlp_norm.data.fill(1.0);
    p.final_norm.data.fill(1.0);
    for a in 0..vocab {
        let target = transitions.get(&(a as TokenId)).copied().or(fallback);
        if let Some(b) = target {
            p.output.data[a * vocab + b as usize] = strength;
        }
    }
    p
}

/// Model whose output head is zero, so every position predicts uniformly.
pub fn uniform_model<F: Real>(vocab: usize, context_len: usize) -> ModelParams<F> {
    let cfg = ModelConfig::new(vocab, 8, 1, 2, context_len);
    let mut p = rlml_core::model::init_model::<F>(&cfg, 1).unwrap();
    p.output.data.iter_mut().for_each(|x| *x = F::zero());
    p
}

/// Two-pass mean and population standard deviation in f64, plus the exact
/// integer total.
pub fn stats_oracle(counts: &[u64]) -> (u64, f64, f64) {
    let total: u64 = counts.iter().sum();
    let n = counts.len() as f64;
    let mean = total as f64 / n;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    (total, mean, var.sqrt())
}

/// Perplexity recomputed position by position: each prefix is run through
/// the model on its own and its last row is turned into probabilities with a
/// plain exp/sum softmax.
pub fn perplexity_oracle(params: &ModelParams<f64>, ids: &[TokenId]) -> f64 {
    let mut log_sum = 0.0;
    for i in 1..ids.len() {
        let logits = rlml_core::model::forward(params, &ids[..i]).unwrap();
        let row = logits.row(i - 1);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        log_sum += (row[ids[i] as usize].exp() / z).ln();
    }
    (-log_sum / (ids.len() - 1) as f64).exp()
}

/// Naive BPE: recount every pair from scratch each round, pick the highest
/// count, break ties on the left piece bytes then the right piece bytes.
pub fn bpe_oracle(texts: &[&str], n_merges: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut docs: Vec<Vec<Vec<u8>>> = texts
        .iter()
        .map(|t| t.bytes().map(|b| vec![b]).collect())
        .collect();
    let mut merges = Vec::new();
    while merges.len() < n_merges {
        let mut counts: HashMap<(Vec<u8>, Vec<u8>), u64> = HashMap::new();
        for d in &docs {
            for w in d.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += 1;
            }
        }
        let Some(max) = counts.values().copied().max().filter(|&m| m >= 2) else {
            break;
        };
        let best = counts
            .into_iter()
            .filter(|(_, c)| *c == max)
            .map(|(p, _)| p)
            .min()
            .unwrap();
        for d in docs.iter_mut() {
            let mut out = Vec::with_capacity(d.len());
            let mut i = 0;
            while i < d.len() {
                if i + 1 < d.len() && d[i] == best.0 && d[i + 1] == best.1 {
                    out.push([best.0.clone(), best.1.clone()].concat());
                    i += 2;
                } else {
                    out.push(d[i].clone());
                    i += 1;
                }
            }
            *d = out;
        }
        merges.push(best);
    }
    merges
}

/// Tokenizer in which `output` is a single token, and a bigram model that,
/// after the last byte of any prompt ending in `prompt_end`, emits exactly
/// that token and then EOS.
pub fn rigged_generator(output: &str, prompt_end: u8) -> (rlml_core::tokenizer::Tokenizer, ModelParams<f64>) {
    use rlml_core::tokenizer::{byte_id, train_bpe_texts, EOS};
    let tok = train_bpe_texts([output, output], 1024).unwrap();
    let ids = tok.encode(output);
    assert_eq!(ids.len(), 1, "output should collapse to one token");
    let transitions = HashMap::from([(byte_id(prompt_end), ids[0]), (ids[0], EOS)]);
    let p = bigram_model(tok.vocab_size(), 48, &transitions, None, 20.0);
    (tok, p)
}

/// Scale that the final RMSNorm applies to a one-hot residual in
/// [`bigram_model`], so output weights can be set to exact logits.
pub fn one_hot_norm_scale(p: &ModelParams<f64>) -> f64 {
    1.0 / (1.0 / p.config.dim as f64 + p.config.norm_eps).sqrt()
}
