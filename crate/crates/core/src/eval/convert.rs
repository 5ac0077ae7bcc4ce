//! Conversion of published benchmark JSONL files into the task format.
//!
//! A [`ConvertSpec`] names the JSON pointers holding the query, choices, gold
//! label and answer. Presets cover the native layouts of the supported
//! benchmark families; any field can be overridden from configuration.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tasks::{BenchmarkTask, GenerativeItem, McItem, TaskItems, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldFormat {
    /// Zero-based index, as a number or numeric string.
    Index,
    /// One-based index, as a number or numeric string.
    OneBased,
    /// "A", "B", ... or "1", "2", ...
    Letter,
    /// Array of 0/1 flags; the first 1 marks the gold choice.
    Flags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertSpec {
    pub kind: TaskKind,
    /// Pointer to the query text.
    pub query: String,
    /// Query rendering; `{}` is replaced by the query text.
    #[serde(default = "default_template")]
    pub query_template: String,
    /// One pointer to an array of strings, or one pointer per choice.
    #[serde(default)]
    pub choices: Vec<String>,
    /// Prepended to every choice.
    #[serde(default)]
    pub choice_prefix: String,
    #[serde(default)]
    pub gold: Option<String>,
    #[serde(default = "default_gold_format")]
    pub gold_format: GoldFormat,
    /// Blank marker in the query. When set, each choice is substituted into
    /// the query and the result becomes the choice, with an empty query.
    #[serde(default)]
    pub blank: Option<String>,
    /// Pointer to the reference answer (generative tasks).
    #[serde(default)]
    pub answer: Option<String>,
}

fn default_template() -> String {
    "{}".to_string()
}

fn default_gold_format() -> GoldFormat {
    GoldFormat::Index
}

impl ConvertSpec {
    /// Built-in mapping for a benchmark family, matched by name prefix.
    pub fn preset(name: &str) -> Option<ConvertSpec> {
        let mc = |query: &str, template: &str, choices: &[&str], gold: &str, fmt: GoldFormat| ConvertSpec {
            kind: TaskKind::MultipleChoice,
            query: query.into(),
            query_template: template.into(),
            choices: choices.iter().map(|s| s.to_string()).collect(),
            choice_prefix: " ".into(),
            gold: Some(gold.into()),
            gold_format: fmt,
            blank: None,
            answer: None,
        };
        let lower = name.to_lowercase();
        let spec = if lower.starts_with("arc") {
            mc("/question", "Question: {}\nAnswer:", &["/choices/text"], "/answerKey", GoldFormat::Letter)
        } else if lower.starts_with("hellaswag") {
            mc("/ctx", "{}", &["/endings"], "/label", GoldFormat::Index)
        } else if lower.starts_with("winogrande") {
            ConvertSpec {
                choice_prefix: String::new(),
                blank: Some("_".into()),
                ..mc("/sentence", "{}", &["/option1", "/option2"], "/answer", GoldFormat::OneBased)
            }
        } else if lower.starts_with("mmlu") {
            mc("/question", "Question: {}\nAnswer:", &["/choices"], "/answer", GoldFormat::Index)
        } else if lower.starts_with("truthfulqa") {
            mc("/question", "Q: {}\nA:", &["/mc1_targets/choices"], "/mc1_targets/labels", GoldFormat::Flags)
        } else if lower.starts_with("gsm8k") {
            ConvertSpec {
                kind: TaskKind::Generative,
                query: "/question".into(),
                query_template: "Question: {}\nAnswer:".into(),
                choices: Vec::new(),
                choice_prefix: String::new(),
                gold: None,
                gold_format: GoldFormat::Index,
                blank: None,
                answer: Some("/answer".into()),
            }
        } else {
            return None;
        };
        Some(spec)
    }
}

fn field<'a>(v: &'a Value, ptr: &str) -> std::result::Result<&'a Value, String> {
    v.pointer(ptr).ok_or_else(|| format!("missing field {ptr:?}"))
}

fn string(v: &Value, ptr: &str) -> std::result::Result<String, String> {
    match field(v, ptr)? {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(format!("field {ptr:?} is not a string")),
    }
}

fn index_of(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n.as_i64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn gold_index(v: &Value, fmt: GoldFormat) -> std::result::Result<usize, String> {
    let idx = match fmt {
        GoldFormat::Index => index_of(v),
        GoldFormat::OneBased => index_of(v).map(|i| i - 1),
        GoldFormat::Letter => match v.as_str().map(str::trim) {
            Some(s) if s.len() == 1 && s.as_bytes()[0].is_ascii_uppercase() => Some((s.as_bytes()[0] - b'A') as i64),
            Some(s) => s.parse::<i64>().ok().map(|i| i - 1),
            None => None,
        },
        GoldFormat::Flags => v
            .as_array()
            .and_then(|a| a.iter().position(|x| x.as_i64() == Some(1)))
            .map(|i| i as i64),
    };
    idx.filter(|&i| i >= 0)
        .map(|i| i as usize)
        .ok_or_else(|| format!("cannot read gold label {v}"))
}

fn convert_mc(v: &Value, spec: &ConvertSpec) -> std::result::Result<McItem, String> {
    let raw_query = string(v, &spec.query)?;
    let mut choices = match spec.choices.as_slice() {
        [one] if field(v, one)?.is_array() => field(v, one)?
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_str().map(String::from).ok_or_else(|| format!("non-string choice in {one:?}")))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        ptrs => ptrs.iter().map(|p| string(v, p)).collect::<std::result::Result<Vec<_>, _>>()?,
    };
    let gold_ptr = spec.gold.as_deref().ok_or("no gold pointer configured")?;
    let gold = gold_index(field(v, gold_ptr)?, spec.gold_format)?;
    let query = match &spec.blank {
        Some(blank) => {
            if !raw_query.contains(blank.as_str()) {
                return Err(format!("query has no blank {blank:?}"));
            }
            choices = choices
                .iter()
                .map(|c| raw_query.replacen(blank.as_str(), c, 1))
                .collect();
            String::new()
        }
        None => spec.query_template.replace("{}", &raw_query),
    };
    let choices = choices.into_iter().map(|c| format!("{}{c}", spec.choice_prefix)).collect();
    Ok(McItem { query, choices, gold })
}

fn convert_gen(v: &Value, spec: &ConvertSpec) -> std::result::Result<GenerativeItem, String> {
    let query = spec.query_template.replace("{}", &string(v, &spec.query)?);
    let ptr = spec.answer.as_deref().ok_or("no answer pointer configured")?;
    Ok(GenerativeItem {
        query,
        answer: string(v, ptr)?,
    })
}

/// Convert native benchmark records (one JSON object per line) into a task.
pub fn convert_records(name: &str, spec: &ConvertSpec, lines: &[String]) -> Result<BenchmarkTask> {
    let records = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Value>(l)
                .map(|v| (i + 1, v))
                .map_err(|e| Error::record(i + 1, format!("malformed record: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let items = match spec.kind {
        TaskKind::MultipleChoice => TaskItems::MultipleChoice(
            records
                .iter()
                .map(|(line, v)| convert_mc(v, spec).map_err(|m| Error::record(*line, m)))
                .collect::<Result<_>>()?,
        ),
        TaskKind::Generative => TaskItems::Generative(
            records
                .iter()
                .map(|(line, v)| convert_gen(v, spec).map_err(|m| Error::record(*line, m)))
                .collect::<Result<_>>()?,
        ),
    };
    BenchmarkTask::new(name, items)
}
