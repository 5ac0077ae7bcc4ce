mod common;

use std::collections::HashMap;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlml_core::corpus::QAPair;
use rlml_core::eval::{
    average_perplexity, eval_generative, eval_multiple_choice, score_choice, sequence_perplexity, sweep_eval,
    BenchmarkTask, GenerativeItem, ItemOutcome, McItem, TaskItems,
};
use rlml_core::model::{init_model_with_std, ModelConfig, ModelParams};
use rlml_core::tokenizer::{byte_id, Tokenizer, BOS};
use rlml_core::train::{Checkpoint, Phase, TrainConfig};

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let tok = Tokenizer::byte_level();
    let p = uniform_model::<f64>(tok.vocab_size(), 32);
    let ppl = sequence_perplexity(&p, &tok, "Labas rytas").unwrap();
    assert!((ppl - 260.0).abs() / 260.0 < 1e-6);
    let p32 = uniform_model::<f32>(tok.vocab_size(), 32);
    assert!((sequence_perplexity(&p32, &tok, "Labas").unwrap() - 260.0).abs() / 260.0 < 1e-6);
}

#[test]
fn hand_computed_two_token_perplexity() {
    // p("x" | BOS) = 0.5 and p("y" | "x") = 0.25 over 260 tokens.
    let tok = Tokenizer::byte_level();
    let mut p = bigram_model(260, 8, &HashMap::new(), None, 0.0);
    let s = one_hot_norm_scale(&p);
    let (x, y) = (byte_id(b'x') as usize, byte_id(b'y') as usize);
    p.output.data[BOS as usize * 260 + x] = 259f64.ln() / s;
    p.output.data[x * 260 + y] = (259.0f64 / 3.0).ln() / s;
    let ppl = sequence_perplexity(&p, &tok, "xy").unwrap();
    assert!((ppl - 2.0 * 2f64.sqrt()).abs() < 1e-9, "{ppl}");
}

#[test]
fn perplexity_matches_prefix_oracle() {
    let cfg = ModelConfig::new(260, 8, 2, 2, 24);
    let tok = Tokenizer::byte_level();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..20 {
        let p = init_model_with_std::<f64>(&cfg, case, 0.3).unwrap();
        let len = rng.random_range(1..20);
        let text: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
        let ppl = sequence_perplexity(&p, &tok, &text).unwrap();
        let oracle = perplexity_oracle(&p, &tok.encode_with_bos(&text));
        assert!(ppl >= 1.0);
        assert!((ppl - oracle).abs() / oracle < 1e-9, "case {case}: {ppl} vs {oracle}");
    }
}

#[test]
fn perplexity_length_limits() {
    let tok = Tokenizer::byte_level();
    let p = uniform_model::<f64>(260, 8);
    assert!(sequence_perplexity(&p, &tok, "").is_err());
    assert!(sequence_perplexity(&p, &tok, "1234567").is_ok());
    assert!(sequence_perplexity(&p, &tok, "12345678").is_err());
}

#[test]
fn average_skips_long_pairs() {
    let tok = Tokenizer::byte_level();
    let p = init_model_with_std::<f64>(&ModelConfig::new(260, 8, 1, 2, 12), 3, 0.5).unwrap();
    let qa = vec![
        QAPair { question: "a".into(), answer: "b".into() },
        QAPair { question: "toli".into(), answer: "per ilgas atsakymas".into() },
        QAPair { question: "cd".into(), answer: "e".into() },
    ];
    let r = average_perplexity(&p, &tok, &qa).unwrap();
    assert_eq!(r.skipped, 1);
    assert_eq!(r.per_item.iter().map(|i| i.item).collect::<Vec<_>>(), vec![0, 2]);
    let mean = (r.per_item[0].perplexity + r.per_item[1].perplexity) / 2.0;
    assert!((r.average - mean).abs() < 1e-12);
    assert!((r.per_item[0].perplexity - sequence_perplexity(&p, &tok, "a b").unwrap()).abs() < 1e-15);
    assert!(average_perplexity(&p, &tok, &qa[1..2]).is_err());
    assert!(average_perplexity(&p, &tok, &[]).is_err());
}

#[test]
fn uniform_choice_scores() {
    let tok = Tokenizer::byte_level();
    let p = uniform_model::<f64>(260, 32);
    let (s, n) = score_choice(&p, &tok, "Klausimas:", " taip").unwrap();
    assert_eq!(n, 5);
    assert!((s + 5.0 * 260f64.ln()).abs() < 1e-9);
    let (longer, _) = score_choice(&p, &tok, "Klausimas:", " taip taip").unwrap();
    assert!(longer < s);
    assert!(score_choice(&p, &tok, "Klausimas:", "").is_err());
}

/// Bigram model over bytes that follows the chain a -> b -> c -> ... -> z.
fn alphabet_chain() -> ModelParams<f64> {
    let t: HashMap<u32, u32> = (b'a'..=b'y').map(|c| (byte_id(c), byte_id(c + 1))).collect();
    bigram_model(260, 32, &t, None, 50.0)
}

fn chain_task(n: usize, seed: u64) -> BenchmarkTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|_| {
            let start = rng.random_range(b'a'..b'u');
            let gold_text: String = (1..=3).map(|k| (start + k) as char).collect();
            let gold = rng.random_range(0..4);
            let choices = (0..4)
                .map(|i| {
                    if i == gold {
                        gold_text.clone()
                    } else {
                        // Breaks the chain on the first letter.
                        let c = (start + 2 + i as u8) as char;
                        format!("{c}{c}{c}")
                    }
                })
                .collect();
            McItem { query: (start as char).to_string(), choices, gold }
        })
        .collect();
    BenchmarkTask::new("arc_chain", TaskItems::MultipleChoice(items)).unwrap()
}

#[test]
fn rigged_gold_gets_full_accuracy() {
    let tok = Tokenizer::byte_level();
    let p = alphabet_chain();
    let task = chain_task(30, 1);
    let r = eval_multiple_choice(&p, &tok, &task).unwrap();
    assert_eq!((r.acc, r.acc_norm), (1.0, Some(1.0)));
    let TaskItems::MultipleChoice(items) = &task.items else { unreachable!() };
    let (s, _) = score_choice(&p, &tok, &items[0].query, &items[0].choices[items[0].gold]).unwrap();
    assert_eq!(s, 0.0);
}

#[test]
fn uniform_ties_pick_first_choice() {
    let tok = Tokenizer::byte_level();
    let p = uniform_model::<f64>(260, 32);
    let task = chain_task(40, 2);
    let TaskItems::MultipleChoice(items) = &task.items else { unreachable!() };
    let zero = items.iter().filter(|i| i.gold == 0).count() as f64 / 40.0;
    let r = eval_multiple_choice(&p, &tok, &task).unwrap();
    assert_eq!(r.acc, zero);
    assert_eq!(r.acc_norm, Some(zero));
}

#[test]
fn generative_answers() {
    let task = |answer: &str| {
        BenchmarkTask::new(
            "gsm8k",
            TaskItems::Generative(vec![GenerativeItem { query: "Kiek?".into(), answer: answer.into() }]),
        )
        .unwrap()
    };
    let (tok, p) = rigged_generator("#### 42", b'?');
    let r = eval_generative(&p, &tok, &task("42"), 8).unwrap();
    assert_eq!((r.acc, r.unparseable), (1.0, 0));
    assert_eq!(r.acc_norm, None);
    let (tok, p) = rigged_generator("#### 1000", b'?');
    assert_eq!(eval_generative(&p, &tok, &task("1,000"), 8).unwrap().acc, 1.0);
    let (tok, p) = rigged_generator("42", b'?');
    let r = eval_generative(&p, &tok, &task("42"), 8).unwrap();
    assert_eq!((r.acc, r.unparseable), (0.0, 1));
    match &r.items[0] {
        ItemOutcome::Generated { output, answer, .. } => {
            assert_eq!(output, "42");
            assert_eq!(*answer, None);
        }
        other => panic!("{other:?}"),
    }
}

fn checkpoint(params: ModelParams<f64>, fraction: f64, fingerprint: &str) -> Checkpoint {
    Checkpoint {
        model_config: params.config.clone(),
        train_config: TrainConfig::default(),
        tokenizer_fingerprint: fingerprint.into(),
        phase: Phase::Pretrain,
        fraction,
        step: (fraction * 10.0) as u64,
        total_steps: 10,
        tokens_seen: 0,
        skipped_examples: 0,
        params: params.cast(),
        optimizer: None,
    }
}

#[test]
fn sweep_rows_sorted_and_validated() {
    let tok = Tokenizer::byte_level();
    let fp = tok.fingerprint();
    let cfg = ModelConfig::new(260, 8, 1, 2, 32);
    let ckpts: Vec<Checkpoint> = [0.5, 0.0, 1.0]
        .iter()
        .enumerate()
        .map(|(i, &f)| checkpoint(init_model_with_std(&cfg, i as u64, 0.2).unwrap(), f, fp))
        .collect();
    let qa = vec![QAPair { question: "Kas?".into(), answer: "Vilnius.".into() }];
    let task = chain_task(5, 3);
    let r = sweep_eval(&ckpts, &tok, &qa, std::slice::from_ref(&task), 4).unwrap();
    assert_eq!(r.rows.iter().map(|x| x.fraction).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
    assert!(r.rows.iter().all(|x| x.avg_ppl >= 1.0 && x.tasks.len() == 1));

    let mut dup = ckpts.clone();
    dup.push(ckpts[0].clone());
    let e = sweep_eval(&dup, &tok, &qa, &[], 4).unwrap_err().to_string();
    assert!(e.contains("duplicate fraction"), "{e}");
    let mut bad = ckpts.clone();
    bad[1].tokenizer_fingerprint = "other".into();
    assert!(sweep_eval(&bad, &tok, &qa, &[], 4).is_err());
}

#[test]
fn evaluation_leaves_params_untouched() {
    let tok = Tokenizer::byte_level();
    let p = init_model_with_std::<f64>(&ModelConfig::new(260, 8, 1, 2, 32), 5, 0.5).unwrap();
    let before = p.clone();
    let qa = vec![QAPair { question: "a".into(), answer: "b".into() }];
    average_perplexity(&p, &tok, &qa).unwrap();
    eval_multiple_choice(&p, &tok, &chain_task(5, 4)).unwrap();
    assert_eq!(p, before);
}
