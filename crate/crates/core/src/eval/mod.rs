//! Perplexity and benchmark scoring. All functions are read-only over the
//! parameters and evaluate items in parallel with results kept in item order.

mod convert;
mod tasks;

use serde::{Deserialize, Serialize};

use crate::corpus::QAPair;
use crate::error::{Error, Result};
use crate::model::{forward, greedy_generate, ModelParams, Real};
use crate::par;
use crate::tokenizer::Tokenizer;
use crate::train::Checkpoint;

pub use convert::{convert_records, ConvertSpec, GoldFormat};
pub use tasks::{
    load_task, parse_task, save_task, task_to_jsonl, BenchmarkTask, GenerativeItem, McItem, TaskItems, TaskKind,
    TASK_FAMILIES,
};

/// Marker preceding the final answer in generated solutions.
pub const ANSWER_MARKER: &str = "####";

/// Mean per-token perplexity of `BOS + encode(text)`, over every token after
/// BOS, with natural logs accumulated in f64.
pub fn sequence_perplexity<F: Real>(params: &ModelParams<F>, tok: &Tokenizer, text: &str) -> Result<f64> {
    let ids = tok.encode_with_bos(text);
    let ctx = params.config.context_len;
    if ids.len() < 2 {
        return Err(Error::Data("text is empty after tokenization".into()));
    }
    if ids.len() > ctx {
        return Err(Error::Data(format!(
            "sequence of {} tokens exceeds context length {ctx}",
            ids.len()
        )));
    }
    let logits = forward(params, &ids)?;
    let n = ids.len() - 1;
    let sum: f64 = (0..n).map(|i| logits.log_prob(i, ids[i + 1])).sum();
    Ok((-sum / n as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemPerplexity {
    /// Index of the pair in the input list.
    pub item: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub per_item: Vec<ItemPerplexity>,
    pub average: f64,
    /// Pairs that did not fit in the context window.
    pub skipped: usize,
}

/// Text scored for a question/answer pair.
pub fn qa_text(pair: &QAPair) -> String {
    format!("{} {}", pair.question, pair.answer)
}

/// Arithmetic mean of per-pair perplexities over `question + " " + answer`.
pub fn average_perplexity<F: Real>(params: &ModelParams<F>, tok: &Tokenizer, qa: &[QAPair]) -> Result<PerplexityReport> {
    if qa.is_empty() {
        return Err(Error::Data("no question/answer pairs".into()));
    }
    let ctx = params.config.context_len;
    let results = par::map(qa, |pair| {
        let text = qa_text(pair);
        let len = tok.encode(&text).len() + 1;
        if len > ctx || len < 2 {
            return Ok(None);
        }
        sequence_perplexity(params, tok, &text).map(Some)
    });
    let mut per_item = Vec::new();
    let mut skipped = 0;
    for (item, r) in results.into_iter().enumerate() {
        match r? {
            Some(perplexity) => per_item.push(ItemPerplexity { item, perplexity }),
            None => skipped += 1,
        }
    }
    if per_item.is_empty() {
        return Err(Error::Data(format!("all {skipped} pairs were skipped")));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} pairs that do not fit the context");
    }
    let average = per_item.iter().map(|p| p.perplexity).sum::<f64>() / per_item.len() as f64;
    Ok(PerplexityReport {
        per_item,
        average,
        skipped,
    })
}

/// Summed log-probability of `continuation` given `context`, and the number
/// of continuation tokens. Continuation tokens are those of
/// `BOS + encode(context + continuation)` past the length of
/// `BOS + encode(context)`.
pub fn score_choice<F: Real>(
    params: &ModelParams<F>,
    tok: &Tokenizer,
    context: &str,
    continuation: &str,
) -> Result<(f64, usize)> {
    let ctx_len = tok.encode_with_bos(context).len();
    let full = tok.encode_with_bos(&format!("{context}{continuation}"));
    if full.len() <= ctx_len {
        return Err(Error::Data("continuation is empty after tokenization".into()));
    }
    let logits = forward(params, &full)?;
    let sum = (ctx_len..full.len()).map(|i| logits.log_prob(i - 1, full[i])).sum();
    Ok((sum, full.len() - ctx_len))
}

/// First index of the maximum; ties go to the lowest index.
fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ItemOutcome {
    Choice {
        item: usize,
        pick: usize,
        pick_norm: usize,
        gold: usize,
    },
    Generated {
        item: usize,
        output: String,
        /// Extracted answer, absent when the output has no marker.
        answer: Option<String>,
        correct: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub task: String,
    /// Items evaluated (excluding skipped ones).
    pub n_items: usize,
    pub acc: f64,
    /// Present for multiple-choice tasks only.
    pub acc_norm: Option<f64>,
    pub skipped: usize,
    /// Generative outputs without an answer marker.
    pub unparseable: usize,
    pub items: Vec<ItemOutcome>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Zero-shot log-likelihood scoring. Each choice is appended verbatim to the
/// query; the pick maximizes the summed log-probability, the normalized pick
/// maximizes it per continuation token.
pub fn eval_multiple_choice<F: Real>(params: &ModelParams<F>, tok: &Tokenizer, task: &BenchmarkTask) -> Result<AccuracyReport> {
    let TaskItems::MultipleChoice(items) = &task.items else {
        return Err(Error::Data(format!("task {} is not multiple choice", task.name)));
    };
    let ctx = params.config.context_len;
    let results = par::map(items, |item| -> Result<Option<(usize, usize)>> {
        let fits = item
            .choices
            .iter()
            .all(|c| tok.encode_with_bos(&format!("{}{c}", item.query)).len() <= ctx);
        if !fits {
            return Ok(None);
        }
        let mut sums = Vec::with_capacity(item.choices.len());
        let mut norms = Vec::with_capacity(item.choices.len());
        for c in &item.choices {
            let (s, n) = score_choice(params, tok, &item.query, c)?;
            sums.push(s);
            norms.push(s / n as f64);
        }
        Ok(Some((first_argmax(&sums), first_argmax(&norms))))
    });
    let mut outcomes = Vec::new();
    let (mut correct, mut correct_norm, mut skipped) = (0, 0, 0);
    for (idx, r) in results.into_iter().enumerate() {
        let Some((pick, pick_norm)) = r? else {
            skipped += 1;
            continue;
        };
        let gold = items[idx].gold;
        correct += usize::from(pick == gold);
        correct_norm += usize::from(pick_norm == gold);
        outcomes.push(ItemOutcome::Choice {
            item: idx,
            pick,
            pick_norm,
            gold,
        });
    }
    let n = outcomes.len();
    Ok(AccuracyReport {
        task: task.name.clone(),
        n_items: n,
        acc: ratio(correct, n),
        acc_norm: Some(ratio(correct_norm, n)),
        skipped,
        unparseable: 0,
        items: outcomes,
    })
}

/// Text after the last answer marker with whitespace and commas removed.
/// `None` when there is no marker or nothing follows it.
pub fn extract_answer(text: &str) -> Option<String> {
    let pos = text.rfind(ANSWER_MARKER)?;
    let ans = normalize_answer(&text[pos + ANSWER_MARKER.len()..]);
    (!ans.is_empty()).then_some(ans)
}

/// Reference answers get the same treatment as outputs: if a marker is
/// present the text after it is used, otherwise the whole string.
pub fn reference_answer(reference: &str) -> String {
    match reference.rfind(ANSWER_MARKER) {
        Some(pos) => normalize_answer(&reference[pos + ANSWER_MARKER.len()..]),
        None => normalize_answer(reference),
    }
}

fn normalize_answer(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace() && *c != ',').collect()
}

/// Greedy generation with exact match on the extracted answer.
pub fn eval_generative<F: Real>(
    params: &ModelParams<F>,
    tok: &Tokenizer,
    task: &BenchmarkTask,
    max_new_tokens: usize,
) -> Result<AccuracyReport> {
    let TaskItems::Generative(items) = &task.items else {
        return Err(Error::Data(format!("task {} is not generative", task.name)));
    };
    let ctx = params.config.context_len;
    let results = par::map(items, |item| -> Result<Option<String>> {
        if tok.encode_with_bos(&item.query).len() >= ctx {
            return Ok(None);
        }
        greedy_generate(params, tok, &item.query, max_new_tokens).map(Some)
    });
    let mut outcomes = Vec::new();
    let (mut correct, mut skipped, mut unparseable) = (0, 0, 0);
    for (idx, r) in results.into_iter().enumerate() {
        let Some(output) = r? else {
            skipped += 1;
            continue;
        };
        let answer = extract_answer(&output);
        let ok = answer.as_deref() == Some(reference_answer(&items[idx].answer).as_str());
        unparseable += usize::from(answer.is_none());
        correct += usize::from(ok);
        outcomes.push(ItemOutcome::Generated {
            item: idx,
            output,
            answer,
            correct: ok,
        });
    }
    let n = outcomes.len();
    Ok(AccuracyReport {
        task: task.name.clone(),
        n_items: n,
        acc: ratio(correct, n),
        acc_norm: None,
        skipped,
        unparseable,
        items: outcomes,
    })
}

/// Evaluate one task with the scorer matching its kind.
pub fn eval_task<F: Real>(
    params: &ModelParams<F>,
    tok: &Tokenizer,
    task: &BenchmarkTask,
    max_new_tokens: usize,
) -> Result<AccuracyReport> {
    match task.kind() {
        TaskKind::MultipleChoice => eval_multiple_choice(params, tok, task),
        TaskKind::Generative => eval_generative(params, tok, task, max_new_tokens),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub acc: f64,
    pub acc_norm: Option<f64>,
}

impl From<&AccuracyReport> for TaskScore {
    fn from(r: &AccuracyReport) -> Self {
        TaskScore {
            task: r.task.clone(),
            acc: r.acc,
            acc_norm: r.acc_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub step: u64,
    pub avg_ppl: f64,
    pub tasks: Vec<TaskScore>,
}

impl SweepRow {
    /// Unweighted mean over the mmlu subset scores, if any.
    pub fn mmlu_aggregate(&self) -> Option<TaskScore> {
        let subs: Vec<&TaskScore> = self.tasks.iter().filter(|t| is_mmlu(&t.task)).collect();
        if subs.is_empty() {
            return None;
        }
        let n = subs.len() as f64;
        let acc = subs.iter().map(|t| t.acc).sum::<f64>() / n;
        let acc_norm = subs
            .iter()
            .map(|t| t.acc_norm)
            .sum::<Option<f64>>()
            .map(|s| s / n);
        Some(TaskScore {
            task: MMLU_AGGREGATE.to_string(),
            acc,
            acc_norm,
        })
    }
}

/// Name of the aggregate series over mmlu subsets.
pub const MMLU_AGGREGATE: &str = "mmlu_lt";

pub fn is_mmlu(task: &str) -> bool {
    task.starts_with("mmlu")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Rows sorted by increasing fraction.
    pub rows: Vec<SweepRow>,
}

/// Average perplexity and every task for each checkpoint.
pub fn sweep_eval(
    checkpoints: &[Checkpoint],
    tok: &Tokenizer,
    qa: &[QAPair],
    tasks: &[BenchmarkTask],
    max_new_tokens: usize,
) -> Result<SweepResult> {
    let mut order: Vec<&Checkpoint> = checkpoints.iter().collect();
    order.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
    for w in order.windows(2) {
        if w[0].fraction == w[1].fraction {
            return Err(Error::Data(format!("duplicate fraction {}", w[0].fraction)));
        }
    }
    for c in &order {
        c.check_tokenizer(tok.fingerprint())?;
    }
    let mut rows = Vec::with_capacity(order.len());
    for c in order {
        log::info!("evaluating checkpoint at fraction {:.2}", c.fraction);
        let ppl = average_perplexity(&c.params, tok, qa)?;
        let mut scores = Vec::with_capacity(tasks.len());
        for t in tasks {
            scores.push(TaskScore::from(&eval_task(&c.params, tok, t, max_new_tokens)?));
        }
        rows.push(SweepRow {
            fraction: c.fraction,
            step: c.step,
            avg_ppl: ppl.average,
            tasks: scores,
        });
    }
    Ok(SweepResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_answer("so #### 42").as_deref(), Some("42"));
        assert_eq!(extract_answer("#### 1 #### 1,000 ").as_deref(), Some("1000"));
        assert_eq!(extract_answer("answer is 42"), None);
        assert_eq!(extract_answer("#### "), None);
        assert_eq!(reference_answer("1,000"), "1000");
        assert_eq!(reference_answer("Step one.\n#### 72"), "72");
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(first_argmax(&[-1.0, -1.0, -2.0]), 0);
        assert_eq!(first_argmax(&[-3.0, -1.0, -1.0]), 1);
    }

    #[test]
    fn mmlu_aggregate_is_unweighted_mean() {
        let row = SweepRow {
            fraction: 0.5,
            step: 3,
            avg_ppl: 10.0,
            tasks: vec![
                TaskScore { task: "arc".into(), acc: 0.9, acc_norm: Some(0.9) },
                TaskScore { task: "mmlu_a".into(), acc: 0.2, acc_norm: Some(0.4) },
                TaskScore { task: "mmlu_b".into(), acc: 0.4, acc_norm: Some(0.5) },
            ],
        };
        let agg = row.mmlu_aggregate().unwrap();
        assert!((agg.acc - 0.3).abs() < 1e-15);
        assert!((agg.acc_norm.unwrap() - 0.45).abs() < 1e-15);
    }
}
