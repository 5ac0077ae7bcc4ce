//! Experiment configuration file.
//!
//! One TOML file with sections mirroring the core types. Relative paths are
//! resolved against the directory holding the config file. Command-line
//! flags override file values, which override built-in defaults.

use std::path::{Path, PathBuf};

use rlml_core::eval::{ConvertSpec, TASK_FAMILIES};
use rlml_core::model::{default_hidden_dim, ModelConfig};
use rlml_core::tokenizer::BASE_VOCAB;
use rlml_core::train::{TrainConfig, FINETUNE_PEAK_LR};
use rlml_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Fraction of corpus documents held out from pretraining.
    #[serde(default)]
    pub holdout_fraction: Option<f64>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub instructions: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: None,
            qa: None,
            instructions: None,
            output_dir: default_output_dir(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection {
            vocab_size: default_vocab(),
        }
    }
}

fn default_vocab() -> usize {
    4096
}

/// Architecture without the vocabulary size, which comes from the tokenizer.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub hidden_dim: Option<usize>,
    pub rope_theta: Option<f64>,
    pub norm_eps: Option<f64>,
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut c = ModelConfig::new(vocab_size, self.dim, self.n_layers, self.n_heads, self.context_len);
        c.hidden_dim = self.hidden_dim.unwrap_or_else(|| default_hidden_dim(self.dim));
        if let Some(t) = self.rope_theta {
            c.rope_theta = t;
        }
        if let Some(e) = self.norm_eps {
            c.norm_eps = e;
        }
        c
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    #[serde(default = "default_finetune_lr")]
    pub peak_lr: f64,
    /// Overrides `train.epochs` for fine-tuning.
    pub epochs: Option<usize>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            peak_lr: FINETUNE_PEAK_LR,
            epochs: None,
        }
    }
}

fn default_finetune_lr() -> f64 {
    FINETUNE_PEAK_LR
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub tasks: Vec<TaskEntry>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            max_new_tokens: default_max_new_tokens(),
            tasks: Vec::new(),
        }
    }
}

fn default_max_new_tokens() -> usize {
    64
}

/// A benchmark file. Without `convert` or `mapping` the file is already in
/// task format; otherwise it holds native records converted under `name`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub path: PathBuf,
    pub name: Option<String>,
    /// Built-in mapping, looked up by family prefix.
    pub convert: Option<String>,
    pub mapping: Option<ConvertSpec>,
}

impl TaskEntry {
    /// Conversion to apply, if the file holds native records.
    pub fn convert_spec(&self) -> Result<Option<(String, ConvertSpec)>> {
        let name = || {
            self.name
                .clone()
                .ok_or_else(|| Error::Config(format!("task {}: converted tasks need a name", self.path.display())))
        };
        match (&self.convert, &self.mapping) {
            (None, None) => Ok(None),
            (Some(_), Some(_)) => Err(Error::Config(format!(
                "task {}: set either convert or mapping, not both",
                self.path.display()
            ))),
            (Some(preset), None) => {
                let spec = ConvertSpec::preset(preset)
                    .ok_or_else(|| Error::Config(format!("unknown conversion preset {preset:?}")))?;
                Ok(Some((name()?, spec)))
            }
            (None, Some(spec)) => Ok(Some((name()?, spec.clone()))),
        }
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// What a command reads, beyond the config itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Needs {
    Corpus,
    Qa,
    Instructions,
    Tokenizer,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read, resolve relative paths and apply overrides.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        if let Some(out) = &overrides.out {
            cfg.paths.output_dir = out.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.paths.corpus, &mut self.paths.qa, &mut self.paths.instructions]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.paths.output_dir);
        for t in &mut self.eval.tasks {
            fix(&mut t.path);
        }
    }

    pub fn tokenizer_path(&self) -> PathBuf {
        self.paths.output_dir.join("tokenizer.json")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.output_dir.join("checkpoints")
    }

    /// Check every setting and every referenced input before anything is
    /// written. `needs` lists inputs the command cannot run without.
    pub fn validate(&self, needs: &[Needs]) -> Result<()> {
        if self.tokenizer.vocab_size < BASE_VOCAB {
            return Err(Error::Config(format!(
                "tokenizer.vocab_size {} below minimum {BASE_VOCAB}",
                self.tokenizer.vocab_size
            )));
        }
        self.model.model_config(self.tokenizer.vocab_size).validate()?;
        self.train.validate()?;
        if !(self.finetune.peak_lr.is_finite() && self.finetune.peak_lr > 0.0) {
            return Err(Error::Config(format!("finetune.peak_lr {} must be positive", self.finetune.peak_lr)));
        }
        if self.finetune.epochs == Some(0) {
            return Err(Error::Config("finetune.epochs must be positive".into()));
        }
        if let Some(f) = self.holdout_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("holdout_fraction {f} outside (0, 1)")));
            }
        }
        if self.eval.max_new_tokens == 0 {
            return Err(Error::Config("eval.max_new_tokens must be positive".into()));
        }
        for t in &self.eval.tasks {
            if let Some(name) = &t.name {
                if !TASK_FAMILIES.iter().any(|f| name.starts_with(f)) {
                    return Err(Error::Config(format!(
                        "task name {name:?} must start with one of {}",
                        TASK_FAMILIES.join(", ")
                    )));
                }
            }
            t.convert_spec()?;
        }

        let inputs = [
            ("paths.corpus", &self.paths.corpus, Needs::Corpus),
            ("paths.qa", &self.paths.qa, Needs::Qa),
            ("paths.instructions", &self.paths.instructions, Needs::Instructions),
        ];
        for (key, path, need) in inputs {
            match path {
                Some(p) => require_file(p)?,
                None if needs.contains(&need) => {
                    return Err(Error::Config(format!("{key} must be set for this command")));
                }
                None => {}
            }
        }
        for t in &self.eval.tasks {
            require_file(&t.path)?;
        }
        if needs.contains(&Needs::Tokenizer) {
            let p = self.tokenizer_path();
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "tokenizer {} not found; run tokenizer-train first",
                    p.display()
                )));
            }
        }
        check_output_dir(&self.paths.output_dir)
    }
}

pub fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{}: no such file", p.display())))
    }
}

/// The output directory must be a directory, or creatable below an existing one.
fn check_output_dir(dir: &Path) -> Result<()> {
    let mut p = dir;
    loop {
        if p.exists() {
            return if p.is_dir() {
                Ok(())
            } else {
                Err(Error::Config(format!("output path {} is not a directory", p.display())))
            };
        }
        match p.parent() {
            Some(parent) if !parent.as_os_str().is_empty() => p = parent,
            _ => return Ok(()),
        }
    }
}
