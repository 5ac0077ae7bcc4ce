mod common;

use rlml_core::corpus::{pack_sequences, InstructionExample, TokenBlock};
use rlml_core::model::{backward, forward, init_model, ModelConfig};
use rlml_core::synthetic::{synthetic_corpus, synthetic_instructions};
use rlml_core::tokenizer::{train_bpe, Tokenizer, PAD};
use rlml_core::train::{
    accumulate_gradients, finetune, finetune_with_lr, instruction_example, load_checkpoint, pretrain, Example,
    Phase, TrainConfig, FINETUNE_PEAK_LR,
};
use rlml_core::Error;

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig::new(vocab, 16, 1, 2, 64)
}

fn setup(n_docs: usize) -> (Tokenizer, Vec<TokenBlock>) {
    let corpus = synthetic_corpus(n_docs, 11);
    let tok = train_bpe(&corpus, 300).unwrap();
    let blocks = pack_sequences(&corpus, &tok, 64).unwrap();
    (tok, blocks)
}

fn small_run() -> TrainConfig {
    TrainConfig {
        peak_lr: 3e-3,
        weight_decay: 0.01,
        per_device_batch: 2,
        grad_accum_steps: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn accumulation_matches_one_big_batch() {
    let (tok, blocks) = setup(80);
    let params = init_model::<f32>(&tiny_config(tok.vocab_size()), 3).unwrap();
    let batch: Vec<Example> = blocks[..4].iter().map(Example::from_block).collect();
    let (la, ga) = accumulate_gradients(&params, &batch, 2).unwrap();
    let (lb, gb) = accumulate_gradients(&params, &batch, 4).unwrap();
    assert!((la - lb).abs() < 1e-12);
    for ((_, a), (_, b)) in ga.named_tensors().iter().zip(gb.named_tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn eleven_checkpoints_with_consistent_bookkeeping() {
    let (tok, blocks) = setup(240);
    let dir = tempfile::tempdir().unwrap();
    let tcfg = small_run();
    let out = pretrain(&tiny_config(tok.vocab_size()), &tcfg, &blocks, tok.fingerprint(), Some(dir.path())).unwrap();
    let total = (blocks.len() / 4) as u64;
    let fracs: Vec<f64> = out.checkpoints.iter().map(|c| c.fraction).collect();
    assert_eq!(fracs, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
    assert_eq!(out.paths.len(), 11);
    assert_eq!(out.trace.points.len() as u64, total);
    for c in &out.checkpoints {
        assert!((c.step as f64 - c.fraction * total as f64).abs() <= 1.0);
        assert_eq!(c.tokens_seen, c.step * 4 * 64);
        assert_eq!(c.total_steps, total);
    }
    assert!(out.trace.points.windows(2).all(|w| w[0].step < w[1].step));
    // Saved files reproduce forward outputs exactly.
    let last = out.checkpoints.last().unwrap();
    let loaded = load_checkpoint(&out.paths[10]).unwrap();
    assert_eq!(loaded, *last);
    let x = &blocks[0].tokens;
    assert_eq!(forward(&loaded.params, x).unwrap().data, forward(&last.params, x).unwrap().data);
}

#[test]
fn runs_are_bit_reproducible() {
    let (tok, blocks) = setup(160);
    let run = || pretrain(&tiny_config(tok.vocab_size()), &small_run(), &blocks, tok.fingerprint(), None).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(x.fingerprint(), y.fingerprint());
    }
}

#[test]
fn too_few_blocks_is_an_error() {
    let (tok, blocks) = setup(80);
    let e = pretrain(&tiny_config(tok.vocab_size()), &small_run(), &blocks[..3], tok.fingerprint(), None).unwrap_err();
    assert!(e.to_string().contains("insufficient data"), "{e}");
}

#[test]
fn failed_run_removes_its_checkpoints() {
    let (tok, mut blocks) = setup(160);
    // An out-of-range token deep in the stream fails after checkpoints exist.
    let used = blocks.len() / 4 * 4;
    blocks[used - 1].tokens[3] = 10_000;
    let dir = tempfile::tempdir().unwrap();
    let r = pretrain(&tiny_config(tok.vocab_size()), &small_run(), &blocks, tok.fingerprint(), Some(dir.path()));
    assert!(r.is_err());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn finetune_records_fixed_learning_rate() {
    let (tok, blocks) = setup(160);
    let out = pretrain(&tiny_config(tok.vocab_size()), &small_run(), &blocks, tok.fingerprint(), None).unwrap();
    let base = out.checkpoints.last().unwrap();
    let examples = synthetic_instructions(8, 1);
    let tcfg = TrainConfig {
        per_device_batch: 1,
        grad_accum_steps: 1,
        ..small_run()
    };
    let ft = finetune(base, &tok, &examples, &tcfg).unwrap();
    assert_eq!(ft.checkpoint.train_config.peak_lr, FINETUNE_PEAK_LR);
    assert_eq!(ft.checkpoint.train_config.peak_lr, 0.00001);
    assert_eq!(ft.checkpoint.phase, Phase::Finetune);
    assert_eq!(ft.checkpoint.optimizer.as_ref().unwrap().t, ft.trace.points.len() as u64);
    // Long prompts are skipped and counted.
    let mut with_long = examples.clone();
    with_long.push(InstructionExample {
        instruction: "ilgas ".repeat(40),
        input: None,
        output: "taip".into(),
    });
    let ft = finetune(base, &tok, &with_long, &tcfg).unwrap();
    assert_eq!((ft.skipped_examples, ft.checkpoint.skipped_examples), (1, 1));
    // Wrong tokenizer is refused before training.
    let other = Tokenizer::byte_level();
    assert!(matches!(
        finetune(base, &other, &examples, &tcfg),
        Err(Error::FingerprintMismatch { .. })
    ));
    assert_eq!(finetune(base, &tok, &[], &tcfg).unwrap_err().to_string(), "no examples");
}

#[test]
fn single_example_overfits_at_retuned_rate() {
    let (tok, blocks) = setup(160);
    let out = pretrain(&tiny_config(tok.vocab_size()), &small_run(), &blocks, tok.fingerprint(), None).unwrap();
    let ex = InstructionExample {
        instruction: "Kur?".into(),
        input: None,
        output: "Kaune.".into(),
    };
    let tcfg = TrainConfig {
        per_device_batch: 1,
        grad_accum_steps: 1,
        ..small_run()
    };
    let ft = finetune_with_lr(out.checkpoints.last().unwrap(), &tok, &vec![ex; 64], &tcfg, 3e-3).unwrap();
    let (first, last) = (ft.trace.first_loss().unwrap(), ft.trace.last_loss().unwrap());
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn prompt_only_example_has_no_gradient() {
    let tok = Tokenizer::byte_level();
    let params = init_model::<f32>(&ModelConfig::new(tok.vocab_size(), 8, 1, 2, 64), 1).unwrap();
    let ex = InstructionExample {
        instruction: "Q".into(),
        input: None,
        output: String::new(),
    };
    let e = instruction_example(&tok, &ex, 64).unwrap();
    assert!(e.targets.iter().all(|&t| t == PAD));
    let err = backward(&params, &e.tokens, &e.targets).unwrap_err();
    assert_eq!(err.to_string(), "all positions masked");
}
