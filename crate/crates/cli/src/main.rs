//! `rlml`: tokenizer training, corpus statistics, pretraining, fine-tuning
//! and evaluation driven by one TOML config file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rlml_core::{par, Error, ErrorKind, Result};

use config::{ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "rlml", version, about = "Train and evaluate small causal language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; overrides paths.output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Overrides train.seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the BPE tokenizer on the corpus.
    TokenizerTrain,
    /// Token statistics and length/source distributions of the corpus.
    Stats,
    /// Pretrain from scratch, writing checkpoints at each data fraction.
    Pretrain,
    /// Instruction fine-tuning of a pretrained checkpoint.
    Finetune {
        /// Base checkpoint (default: the final pretraining checkpoint).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Perplexity and benchmark scores for one checkpoint.
    Eval {
        /// Checkpoint to evaluate (default: the final pretraining checkpoint).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate every pretraining checkpoint and chart the results.
    Sweep,
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        par::set_threads(n);
    }
    let overrides = Overrides {
        out: cli.out,
        seed: cli.seed,
    };
    let cfg = ExperimentConfig::load(&config_path, &overrides)?;
    match cli.command {
        Command::TokenizerTrain => commands::tokenizer_train(&cfg),
        Command::Stats => commands::stats(&cfg),
        Command::Pretrain => commands::pretrain_cmd(&cfg),
        Command::Finetune { checkpoint } => commands::finetune_cmd(&cfg, checkpoint.as_deref()),
        Command::Eval { checkpoint } => commands::eval_cmd(&cfg, checkpoint.as_deref()),
        Command::Sweep => commands::sweep_cmd(&cfg),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RLML_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
