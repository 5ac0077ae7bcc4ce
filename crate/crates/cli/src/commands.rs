use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rlml_core::corpus::{
    load_corpus, load_instructions, load_qa_dataset, pack_sequences, record_token_counts, split_holdout,
    stats_from_counts, Corpus, CorpusStats, QAPair,
};
use rlml_core::eval::{
    average_perplexity, convert_records, eval_task, load_task, sweep_eval, AccuracyReport, BenchmarkTask,
    PerplexityReport,
};
use rlml_core::io::{read_lines, write_atomic};
use rlml_core::report::{
    accuracy_chart, histogram_csv, length_histogram, loss_chart, mmlu_chart, perplexity_chart,
    source_distribution_csv, sweep_csv,
};
use rlml_core::tokenizer::{train_bpe, Tokenizer};
use rlml_core::train::{
    checkpoint_file_name, finetune_with_lr, load_checkpoint, pretrain, save_checkpoint, Checkpoint, Phase,
    TrainConfig,
};
use rlml_core::{Error, Result};
use serde::Serialize;

use crate::config::{require_file, ExperimentConfig, Needs};

const HISTOGRAM_BUCKETS: usize = 20;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn load_tokenizer(cfg: &ExperimentConfig) -> Result<Tokenizer> {
    Tokenizer::load(cfg.tokenizer_path())
}

fn corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    load_corpus(cfg.paths.corpus.as_ref().expect("validated"))
}

fn qa(cfg: &ExperimentConfig) -> Result<Vec<QAPair>> {
    load_qa_dataset(cfg.paths.qa.as_ref().expect("validated"))
}

fn load_tasks(cfg: &ExperimentConfig) -> Result<Vec<BenchmarkTask>> {
    let mut tasks = Vec::with_capacity(cfg.eval.tasks.len());
    for entry in &cfg.eval.tasks {
        let task = match entry.convert_spec()? {
            None => load_task(&entry.path)?,
            Some((name, spec)) => convert_records(&name, &spec, &read_lines(&entry.path)?)?,
        };
        if let Some(name) = &entry.name {
            if *name != task.name {
                return Err(Error::Data(format!(
                    "{}: task is named {:?}, config expects {name:?}",
                    entry.path.display(),
                    task.name
                )));
            }
        }
        info!("task {}: {} items", task.name, task.len());
        tasks.push(task);
    }
    Ok(tasks)
}

/// Default checkpoint for commands that take one: the end of pretraining.
fn checkpoint_path(cfg: &ExperimentConfig, given: Option<&Path>) -> PathBuf {
    given
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.checkpoint_dir().join(checkpoint_file_name(Phase::Pretrain, 1.0)))
}

pub fn tokenizer_train(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate(&[Needs::Corpus])?;
    let corpus = corpus(cfg)?;
    let tok = train_bpe(&corpus, cfg.tokenizer.vocab_size)?;
    create_dir(&cfg.paths.output_dir)?;
    let path = cfg.tokenizer_path();
    tok.save(&path)?;
    println!("tokenizer: {}", path.display());
    println!("vocab_size: {} ({} merges)", tok.vocab_size(), tok.merges().len());
    println!("fingerprint: {}", tok.fingerprint());
    Ok(())
}

#[derive(Serialize)]
struct StatsReport<'a> {
    tokenizer_fingerprint: &'a str,
    #[serde(flatten)]
    stats: CorpusStats,
}

pub fn stats(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate(&[Needs::Corpus, Needs::Tokenizer])?;
    let tok = load_tokenizer(cfg)?;
    let corpus = corpus(cfg)?;
    let counts = record_token_counts(&corpus, &tok)?;
    let stats = stats_from_counts(&counts);
    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    write_json(
        &out.join("stats.json"),
        &StatsReport {
            tokenizer_fingerprint: tok.fingerprint(),
            stats: stats.clone(),
        },
    )?;
    write_text(
        &out.join("record_length_hist.csv"),
        &histogram_csv(&length_histogram(&counts, HISTOGRAM_BUCKETS)),
    )?;
    write_text(&out.join("source_dist.csv"), &source_distribution_csv(&corpus, &counts))?;
    println!("records: {}", stats.record_count);
    println!("total tokens: {}", stats.total_tokens);
    println!(
        "tokens per record: mean {:.2}, std {:.2}",
        stats.mean_tokens_per_record, stats.std_tokens_per_record
    );
    Ok(())
}

pub fn pretrain_cmd(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate(&[Needs::Corpus, Needs::Tokenizer])?;
    let tok = load_tokenizer(cfg)?;
    let full = corpus(cfg)?;
    let (train_docs, holdout) = match cfg.holdout_fraction {
        Some(f) => {
            let (t, h) = split_holdout(&full, f, cfg.train.seed)?;
            (t, Some(h))
        }
        None => (full, None),
    };
    let model_cfg = cfg.model.model_config(tok.vocab_size());
    let blocks = pack_sequences(&train_docs, &tok, model_cfg.context_len)?;
    info!(
        "pretraining {} parameters on {} blocks of {} tokens",
        model_cfg.num_params(),
        blocks.len(),
        model_cfg.context_len
    );

    let out = &cfg.paths.output_dir;
    let ckpt_dir = cfg.checkpoint_dir();
    create_dir(&ckpt_dir)?;
    remove_stale_checkpoints(&ckpt_dir)?;
    if let Some(h) = &holdout {
        write_text(&out.join("holdout.jsonl"), &h.to_jsonl())?;
    }
    let result = pretrain(&model_cfg, &cfg.train, &blocks, tok.fingerprint(), Some(&ckpt_dir))?;
    write_text(&out.join("losses.csv"), &result.trace.to_csv())?;
    write_text(&out.join("losses.svg"), &loss_chart(&result.trace).to_svg())?;
    let last = result.checkpoints.last().expect("at least the initial checkpoint");
    println!("steps: {}", last.total_steps);
    println!("checkpoints: {} in {}", result.paths.len(), ckpt_dir.display());
    if let (Some(a), Some(b)) = (result.trace.first_loss(), result.trace.last_loss()) {
        println!("loss: {a:.4} -> {b:.4}");
    }
    Ok(())
}

/// Old sweep checkpoints would mix into the next sweep.
fn remove_stale_checkpoints(dir: &Path) -> Result<()> {
    for path in list_checkpoints(dir)? {
        info!("removing old checkpoint {}", path.display());
        fs::remove_file(&path).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".rlml"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

#[derive(Serialize)]
struct FinetuneMeta {
    base_checkpoint: String,
    tokenizer_fingerprint: String,
    peak_lr: f64,
    epochs: usize,
    steps: u64,
    used_examples: usize,
    skipped_examples: usize,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
}

pub fn finetune_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<()> {
    cfg.validate(&[Needs::Instructions, Needs::Tokenizer])?;
    let base_path = checkpoint_path(cfg, checkpoint);
    require_file(&base_path)?;
    let tok = load_tokenizer(cfg)?;
    let base = load_checkpoint(&base_path)?;
    base.check_tokenizer(tok.fingerprint())?;
    let examples = load_instructions(cfg.paths.instructions.as_ref().expect("validated"))?;
    if examples.is_empty() {
        return Err(Error::Data("no examples".into()));
    }
    let tcfg = TrainConfig {
        epochs: cfg.finetune.epochs.unwrap_or(cfg.train.epochs),
        ..cfg.train.clone()
    };
    let peak_lr = cfg.finetune.peak_lr;
    info!("fine-tuning on {} examples at peak lr {peak_lr}", examples.len());
    let result = finetune_with_lr(&base, &tok, &examples, &tcfg, peak_lr)?;

    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    save_checkpoint(&result.checkpoint, &out.join(checkpoint_file_name(Phase::Finetune, 1.0)))?;
    write_text(&out.join("finetune_losses.csv"), &result.trace.to_csv())?;
    let meta = FinetuneMeta {
        base_checkpoint: base_path.display().to_string(),
        tokenizer_fingerprint: tok.fingerprint().to_string(),
        peak_lr,
        epochs: tcfg.epochs,
        steps: result.checkpoint.total_steps,
        used_examples: result.used_examples,
        skipped_examples: result.skipped_examples,
        first_loss: result.trace.first_loss(),
        last_loss: result.trace.last_loss(),
    };
    write_json(&out.join("finetune.json"), &meta)?;
    println!("peak_lr: {peak_lr}");
    println!("examples: {} used, {} skipped", meta.used_examples, meta.skipped_examples);
    println!("steps: {}", meta.steps);
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    phase: Phase,
    fraction: f64,
    step: u64,
    perplexity: PerplexityReport,
    tasks: Vec<AccuracyReport>,
}

fn evaluate(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoint,
    tok: &Tokenizer,
    qa: &[QAPair],
    tasks: &[BenchmarkTask],
) -> Result<(PerplexityReport, Vec<AccuracyReport>)> {
    let ppl = average_perplexity(&ckpt.params, tok, qa)?;
    let reports = tasks
        .iter()
        .map(|t| eval_task(&ckpt.params, tok, t, cfg.eval.max_new_tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok((ppl, reports))
}

pub fn eval_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<()> {
    cfg.validate(&[Needs::Qa, Needs::Tokenizer])?;
    let path = checkpoint_path(cfg, checkpoint);
    require_file(&path)?;
    let tok = load_tokenizer(cfg)?;
    let ckpt = load_checkpoint(&path)?;
    ckpt.check_tokenizer(tok.fingerprint())?;
    let qa = qa(cfg)?;
    let tasks = load_tasks(cfg)?;
    let (perplexity, reports) = evaluate(cfg, &ckpt, &tok, &qa, &tasks)?;

    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    println!("average perplexity: {:.4} ({} items, {} skipped)", perplexity.average, perplexity.per_item.len(), perplexity.skipped);
    for r in &reports {
        match r.acc_norm {
            Some(n) => println!("{}: acc {:.4}, acc_norm {:.4}", r.task, r.acc, n),
            None => println!("{}: acc {:.4}", r.task, r.acc),
        }
    }
    let report = EvalReport {
        checkpoint: path.display().to_string(),
        phase: ckpt.phase,
        fraction: ckpt.fraction,
        step: ckpt.step,
        perplexity,
        tasks: reports,
    };
    write_json(&out.join("eval_report.json"), &report)
}

pub fn sweep_cmd(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate(&[Needs::Qa, Needs::Tokenizer])?;
    let ckpt_dir = cfg.checkpoint_dir();
    let paths = if ckpt_dir.is_dir() { list_checkpoints(&ckpt_dir)? } else { Vec::new() };
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no checkpoints in {}; run pretrain first",
            ckpt_dir.display()
        )));
    }
    let tok = load_tokenizer(cfg)?;
    let checkpoints = paths.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let qa = qa(cfg)?;
    let tasks = load_tasks(cfg)?;
    let result = sweep_eval(&checkpoints, &tok, &qa, &tasks, cfg.eval.max_new_tokens)?;

    let out = &cfg.paths.output_dir;
    write_text(&out.join("sweep.csv"), &sweep_csv(&result))?;
    write_json(&out.join("sweep.json"), &result)?;
    write_text(&out.join("ppl_vs_fraction.svg"), &perplexity_chart(&result).to_svg())?;
    if !tasks.is_empty() {
        write_text(&out.join("acc_vs_fraction.svg"), &accuracy_chart(&result).to_svg())?;
    }
    if let Some(chart) = mmlu_chart(&result) {
        write_text(&out.join("mmlu_vs_fraction.svg"), &chart.to_svg())?;
    }
    for row in &result.rows {
        println!("fraction {:.2}: average perplexity {:.4}", row.fraction, row.avg_ppl);
    }
    Ok(())
}
