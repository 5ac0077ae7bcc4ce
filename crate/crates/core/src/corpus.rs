//! Corpus and dataset ingestion, record statistics, and block packing.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::read_lines;
use crate::par;
use crate::tokenizer::{TokenId, Tokenizer, BOS, EOS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Self {
        Corpus { documents }
    }

    /// Build a corpus from bare texts with ids `doc-1`, `doc-2`, ...
    pub fn from_texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Corpus {
            documents: texts
                .into_iter()
                .enumerate()
                .map(|(i, t)| Document {
                    id: format!("doc-{}", i + 1),
                    text: t.into(),
                    source: None,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.documents {
            out.push_str(&serde_json::to_string(d).expect("document serializes"));
            out.push('\n');
        }
        out
    }
}

/// Token-count statistics over a corpus. `std_tokens_per_record` is the
/// population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_tokens: u64,
    pub record_count: u64,
    pub mean_tokens_per_record: f64,
    pub std_tokens_per_record: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub output: String,
}

impl From<&QAPair> for InstructionExample {
    fn from(qa: &QAPair) -> Self {
        InstructionExample {
            instruction: qa.question.clone(),
            input: None,
            output: qa.answer.clone(),
        }
    }
}

/// A rendered instruction prompt and the byte offset where the response starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormattedInstruction {
    pub text: String,
    pub response_offset: usize,
}

impl FormattedInstruction {
    pub fn prompt(&self) -> &str {
        &self.text[..self.response_offset]
    }

    pub fn response(&self) -> &str {
        &self.text[self.response_offset..]
    }
}

/// One packed training block of exactly `context_len` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBlock {
    pub tokens: Vec<TokenId>,
}

fn parse_line(line_no: usize, line: &str) -> Result<serde_json::Map<String, Value>> {
    match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(map)) => Ok(map),
        _ => Err(Error::record(line_no, "malformed record")),
    }
}

fn string_field(
    map: &serde_json::Map<String, Value>,
    line_no: usize,
    key: &str,
) -> Result<Option<String>> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Number(n)) if key == "id" => Ok(Some(n.to_string())),
        Some(_) => Err(Error::record(line_no, format!("field \"{key}\" is not a string"))),
    }
}

/// Non-blank lines of a JSONL file with their 1-based line numbers.
fn jsonl_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    Ok(read_lines(path)?
        .into_iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect())
}

/// Load a JSONL corpus: one object per line with a required `text` field and
/// optional `id` and `source`.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let lines = jsonl_lines(path)?;
    if lines.is_empty() {
        return Err(Error::Data(format!("{}: corpus file is empty", path.display())));
    }
    let mut seen = HashSet::new();
    let mut documents = Vec::with_capacity(lines.len());
    for (line_no, line) in lines {
        let map = parse_line(line_no, &line)?;
        let text = string_field(&map, line_no, "text")?
            .ok_or_else(|| Error::record(line_no, "missing field \"text\""))?;
        if text.trim().is_empty() {
            return Err(Error::record(line_no, "empty text"));
        }
        let id = string_field(&map, line_no, "id")?.unwrap_or_else(|| format!("doc-{line_no}"));
        if !seen.insert(id.clone()) {
            return Err(Error::record(line_no, format!("duplicate id \"{id}\"")));
        }
        let source = string_field(&map, line_no, "source")?;
        documents.push(Document { id, text, source });
    }
    Ok(Corpus { documents })
}

/// Load question/answer pairs. An empty file yields an empty list.
pub fn load_qa_dataset(path: impl AsRef<Path>) -> Result<Vec<QAPair>> {
    let mut pairs = Vec::new();
    for (line_no, line) in jsonl_lines(path.as_ref())? {
        let map = parse_line(line_no, &line)?;
        let get = |key: &str| -> Result<String> {
            match string_field(&map, line_no, key)? {
                Some(s) if !s.trim().is_empty() => Ok(s),
                Some(_) => Err(Error::record(line_no, format!("empty field \"{key}\""))),
                None => Err(Error::record(line_no, format!("missing field \"{key}\""))),
            }
        };
        pairs.push(QAPair {
            question: get("question")?,
            answer: get("answer")?,
        });
    }
    Ok(pairs)
}

pub fn load_instructions(path: impl AsRef<Path>) -> Result<Vec<InstructionExample>> {
    let mut out = Vec::new();
    for (line_no, line) in jsonl_lines(path.as_ref())? {
        let map = parse_line(line_no, &line)?;
        let required = |key: &str| -> Result<String> {
            match string_field(&map, line_no, key)? {
                Some(s) if !s.trim().is_empty() => Ok(s),
                _ => Err(Error::record(line_no, format!("missing field \"{key}\""))),
            }
        };
        let instruction = required("instruction")?;
        let output = required("output")?;
        let input = string_field(&map, line_no, "input")?.filter(|s| !s.is_empty());
        out.push(InstructionExample {
            instruction,
            input,
            output,
        });
    }
    Ok(out)
}

/// Render an Alpaca-style prompt.
pub fn format_instruction(ex: &InstructionExample) -> FormattedInstruction {
    let mut text = format!("### Instruction:\n{}\n\n", ex.instruction);
    if let Some(input) = &ex.input {
        text.push_str(&format!("### Input:\n{input}\n\n"));
    }
    text.push_str("### Response:\n");
    let response_offset = text.len();
    text.push_str(&ex.output);
    FormattedInstruction {
        text,
        response_offset,
    }
}

/// Per-record token counts (no BOS/EOS) and their summary.
pub fn corpus_stats(corpus: &Corpus, tok: &Tokenizer) -> Result<CorpusStats> {
    let counts = record_token_counts(corpus, tok)?;
    Ok(stats_from_counts(&counts))
}

pub fn record_token_counts(corpus: &Corpus, tok: &Tokenizer) -> Result<Vec<u64>> {
    if corpus.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    Ok(par::map(&corpus.documents, |d| tok.encode(&d.text).len() as u64))
}

/// Mean and population std from exact integer sums.
pub fn stats_from_counts(counts: &[u64]) -> CorpusStats {
    let n = counts.len() as u128;
    let sum: u128 = counts.iter().map(|&c| c as u128).sum();
    let sum_sq: u128 = counts.iter().map(|&c| (c as u128) * (c as u128)).sum();
    // n * Σx² - (Σx)² is n² times the population variance and never negative.
    let scaled_var = n * sum_sq - sum * sum;
    let nf = n as f64;
    CorpusStats {
        total_tokens: sum as u64,
        record_count: n as u64,
        mean_tokens_per_record: sum as f64 / nf,
        std_tokens_per_record: (scaled_var as f64).sqrt() / nf,
    }
}

/// Concatenate `BOS + encode(text) + EOS` over documents and cut the stream
/// into consecutive blocks of `context_len`, dropping the trailing partial block.
pub fn pack_sequences(corpus: &Corpus, tok: &Tokenizer, context_len: usize) -> Result<Vec<TokenBlock>> {
    if context_len < 2 {
        return Err(Error::Config(format!("context_len must be >= 2, got {context_len}")));
    }
    let encoded = par::map(&corpus.documents, |d| tok.encode(&d.text));
    pack_encoded(&encoded, context_len)
}

/// Packing over already-encoded documents.
pub fn pack_encoded(docs: &[Vec<TokenId>], context_len: usize) -> Result<Vec<TokenBlock>> {
    if context_len < 2 {
        return Err(Error::Config(format!("context_len must be >= 2, got {context_len}")));
    }
    let mut stream = Vec::with_capacity(docs.iter().map(|e| e.len() + 2).sum());
    for ids in docs {
        stream.push(BOS);
        stream.extend_from_slice(ids);
        stream.push(EOS);
    }
    if stream.len() < context_len {
        return Err(Error::Data(format!(
            "insufficient data: {} tokens for context length {context_len}",
            stream.len()
        )));
    }
    Ok(stream
        .chunks_exact(context_len)
        .map(|c| TokenBlock { tokens: c.to_vec() })
        .collect())
}

/// Deterministic shuffled split; the holdout receives `ceil(fraction * n)`
/// documents and both sides must be non-empty.
pub fn split_holdout(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("holdout fraction {fraction} outside (0, 1)")));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::Data("holdout split needs at least 2 documents".into()));
    }
    let n_holdout = (fraction * n as f64).ceil() as usize;
    if n_holdout >= n {
        return Err(Error::Data(format!(
            "holdout of {n_holdout} documents leaves no training data"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (hold, train) = order.split_at(n_holdout);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Corpus::new(idx.into_iter().map(|i| corpus.documents[i].clone()).collect())
    };
    Ok((pick(train), pick(hold)))
}
