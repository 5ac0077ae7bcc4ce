use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_lines, write_atomic};

/// Accepted task name prefixes. Subset names extend them, e.g. `mmlu_anatomy`.
pub const TASK_FAMILIES: &[&str] = &["arc", "hellaswag", "winogrande", "mmlu", "truthfulqa", "gsm8k"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    Generative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub query: String,
    pub choices: Vec<String>,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerativeItem {
    pub query: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskItems {
    MultipleChoice(Vec<McItem>),
    Generative(Vec<GenerativeItem>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkTask {
    pub name: String,
    pub items: TaskItems,
}

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    kind: TaskKind,
}

impl BenchmarkTask {
    /// Build a task, checking the name and every item.
    pub fn new(name: impl Into<String>, items: TaskItems) -> Result<Self> {
        let task = BenchmarkTask {
            name: name.into(),
            items,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn kind(&self) -> TaskKind {
        match self.items {
            TaskItems::MultipleChoice(_) => TaskKind::MultipleChoice,
            TaskItems::Generative(_) => TaskKind::Generative,
        }
    }

    pub fn len(&self) -> usize {
        match &self.items {
            TaskItems::MultipleChoice(v) => v.len(),
            TaskItems::Generative(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let lower = self.name.to_lowercase();
        if !TASK_FAMILIES.iter().any(|f| lower.starts_with(f)) {
            return Err(Error::Data(format!(
                "task name {:?} is not one of {}",
                self.name,
                TASK_FAMILIES.join(", ")
            )));
        }
        let generative = lower.starts_with("gsm8k");
        if generative != (self.kind() == TaskKind::Generative) {
            return Err(Error::Data(format!("task {} has the wrong kind", self.name)));
        }
        if let TaskItems::MultipleChoice(items) = &self.items {
            for (i, it) in items.iter().enumerate() {
                if it.choices.len() < 2 {
                    return Err(Error::Data(format!("item {i}: needs at least 2 choices")));
                }
                if it.gold >= it.choices.len() {
                    return Err(Error::Data(format!("item {i}: gold index {} out of range", it.gold)));
                }
            }
        }
        Ok(())
    }
}

/// Parse the task JSONL format: a `{"name", "kind"}` header line followed
/// by one item per line. Blank lines are ignored.
pub fn parse_task(lines: &[String]) -> Result<BenchmarkTask> {
    let mut rows = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.as_str()));
    let (hline, htext) = rows.next().ok_or_else(|| Error::Data("task file is empty".into()))?;
    let header: Header = serde_json::from_str(htext).map_err(|e| Error::record(hline, format!("bad task header: {e}")))?;
    let items = match header.kind {
        TaskKind::MultipleChoice => TaskItems::MultipleChoice(parse_items(rows)?),
        TaskKind::Generative => TaskItems::Generative(parse_items(rows)?),
    };
    let task = BenchmarkTask {
        name: header.name,
        items,
    };
    task.validate()?;
    Ok(task)
}

fn parse_items<'a, T: serde::de::DeserializeOwned>(rows: impl Iterator<Item = (usize, &'a str)>) -> Result<Vec<T>> {
    rows.map(|(line, text)| serde_json::from_str(text).map_err(|e| Error::record(line, format!("malformed item: {e}"))))
        .collect()
}

pub fn load_task(path: &Path) -> Result<BenchmarkTask> {
    parse_task(&read_lines(path)?)
}

pub fn task_to_jsonl(task: &BenchmarkTask) -> String {
    let header = Header {
        name: task.name.clone(),
        kind: task.kind(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    let lines: Vec<String> = match &task.items {
        TaskItems::MultipleChoice(v) => v.iter().map(|i| serde_json::to_string(i).unwrap()).collect(),
        TaskItems::Generative(v) => v.iter().map(|i| serde_json::to_string(i).unwrap()).collect(),
    };
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out
}

pub fn save_task(task: &BenchmarkTask, path: &Path) -> Result<()> {
    write_atomic(path, task_to_jsonl(task).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(s: &str) -> Vec<String> {
        s.lines().map(String::from).collect()
    }

    #[test]
    fn parse_and_roundtrip() {
        let t = parse_task(&lines(
            r#"{"name":"arc_easy","kind":"multiple_choice"}
{"query":"Q","choices":["a","b"],"gold":1}

{"query":"R","choices":["c","d","e"],"gold":0}"#,
        ))
        .unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(parse_task(&lines(&task_to_jsonl(&t))).unwrap(), t);
        let g = parse_task(&lines(
            "{\"name\":\"gsm8k\",\"kind\":\"generative\"}\n{\"query\":\"1+1?\",\"answer\":\"2\"}",
        ))
        .unwrap();
        assert_eq!(g.kind(), TaskKind::Generative);
    }

    #[test]
    fn invalid_tasks() {
        let err = |s: &str| parse_task(&lines(s)).unwrap_err().to_string();
        assert!(err(r#"{"name":"squad","kind":"generative"}"#).contains("not one of"));
        assert!(err("{\"name\":\"arc\",\"kind\":\"multiple_choice\"}\n{\"query\":\"Q\",\"choices\":[\"a\",\"b\"],\"gold\":2}")
            .contains("out of range"));
        assert!(err("{\"name\":\"arc\",\"kind\":\"multiple_choice\"}\n{\"query\":\"Q\",\"choices\":[\"a\"],\"gold\":0}")
            .contains("at least 2"));
        assert!(err("{\"name\":\"arc\",\"kind\":\"multiple_choice\"}\nnot json").starts_with("line 2"));
        assert!(err("").contains("empty"));
    }
}
