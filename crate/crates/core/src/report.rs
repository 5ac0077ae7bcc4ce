//! CSV tables and static SVG line charts for training and sweep results.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::corpus::Corpus;
use crate::eval::{is_mmlu, SweepResult, TaskScore, MMLU_AGGREGATE};
use crate::train::LossTrace;

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn task_names(result: &SweepResult) -> Vec<String> {
    result
        .rows
        .first()
        .map(|r| r.tasks.iter().map(|t| t.task.clone()).collect())
        .unwrap_or_default()
}

/// `fraction,avg_ppl,<task>_acc,<task>_acc_norm,...`, one row per checkpoint,
/// with `mmlu_lt` aggregate columns when mmlu subsets are present.
pub fn sweep_csv(result: &SweepResult) -> String {
    let names = task_names(result);
    let has_mmlu = names.iter().any(|n| is_mmlu(n));
    let mut out = String::from("fraction,avg_ppl");
    for n in names.iter().map(String::as_str).chain(has_mmlu.then_some(MMLU_AGGREGATE)) {
        write!(out, ",{n}_acc,{n}_acc_norm").unwrap();
    }
    out.push('\n');
    for row in &result.rows {
        write!(out, "{},{}", row.fraction, row.avg_ppl).unwrap();
        let agg = row.mmlu_aggregate();
        for t in row.tasks.iter().chain(agg.as_ref()) {
            write!(out, ",{},{}", t.acc, opt_cell(t.acc_norm)).unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;
const PALETTE: &[&str] = &[
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

impl LineChart {
    /// Render to a fixed 800x500 SVG document. Identical input gives
    /// identical bytes.
    pub fn to_svg(&self) -> String {
        let (x0, x1) = bounds(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let (y0, y1) = bounds(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif">"#
        )
        .unwrap();
        writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="28" text-anchor="middle" font-size="18">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        )
        .unwrap();
        writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
            TOP + ph,
            LEFT + pw,
            TOP + ph
        )
        .unwrap();
        writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, TOP + ph).unwrap();
        for i in 0..=5 {
            let f = i as f64 / 5.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let (px, py) = (sx(xv), sy(yv));
            writeln!(
                s,
                r#"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 20.0,
                tick_label(xv)
            )
            .unwrap();
            writeln!(
                s,
                r#"<line x1="{}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end" font-size="12">{}</text>"#,
                LEFT - 5.0,
                LEFT - 8.0,
                py + 4.0,
                tick_label(yv)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 20.0,
            escape(&self.x_label)
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="20" y="{0}" text-anchor="middle" font-size="14" transform="rotate(-90 20 {0})">{1}</text>"#,
            TOP + ph / 2.0,
            escape(&self.y_label)
        )
        .unwrap();
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            )
            .unwrap();
            let ly = TOP + 10.0 + 20.0 * i as f64;
            let lx = WIDTH - RIGHT + 15.0;
            writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="12">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&series.name)
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Training loss against optimizer step.
pub fn loss_chart(trace: &LossTrace) -> LineChart {
    LineChart {
        title: "Training loss".into(),
        x_label: "step".into(),
        y_label: "loss".into(),
        series: vec![Series {
            name: "loss".into(),
            points: trace.points.iter().map(|p| (p.step as f64, p.loss)).collect(),
        }],
    }
}

/// Average perplexity against checkpoint fraction.
pub fn perplexity_chart(result: &SweepResult) -> LineChart {
    LineChart {
        title: "Average perplexity".into(),
        x_label: "fraction of pretraining".into(),
        y_label: "perplexity".into(),
        series: vec![Series {
            name: "avg_ppl".into(),
            points: result.rows.iter().map(|r| (r.fraction, r.avg_ppl)).collect(),
        }],
    }
}

fn score_series(result: &SweepResult, keep: impl Fn(&str) -> bool, with_aggregate: bool) -> Vec<Series> {
    let mut names: Vec<String> = task_names(result).into_iter().filter(|n| keep(n)).collect();
    let aggregate = with_aggregate && result.rows.iter().any(|r| r.mmlu_aggregate().is_some());
    if aggregate {
        names.push(MMLU_AGGREGATE.to_string());
    }
    names
        .into_iter()
        .map(|name| {
            let points = result
                .rows
                .iter()
                .filter_map(|r| {
                    let agg = r.mmlu_aggregate();
                    let score: Option<TaskScore> = if name == MMLU_AGGREGATE {
                        agg
                    } else {
                        r.tasks.iter().find(|t| t.task == name).cloned()
                    };
                    score.map(|s| (r.fraction, s.acc))
                })
                .collect();
            Series { name, points }
        })
        .collect()
}

/// Accuracy per task against checkpoint fraction. Mmlu subsets are folded
/// into the `mmlu_lt` aggregate.
pub fn accuracy_chart(result: &SweepResult) -> LineChart {
    LineChart {
        title: "Benchmark accuracy".into(),
        x_label: "fraction of pretraining".into(),
        y_label: "accuracy".into(),
        series: score_series(result, |n| !is_mmlu(n), true),
    }
}

/// Accuracy of each mmlu subset, or `None` without mmlu tasks.
pub fn mmlu_chart(result: &SweepResult) -> Option<LineChart> {
    let series = score_series(result, is_mmlu, false);
    (!series.is_empty()).then(|| LineChart {
        title: "MMLU subsets".into(),
        x_label: "fraction of pretraining".into(),
        y_label: "accuracy".into(),
        series,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bucket {
    /// Inclusive lower bound.
    pub start: u64,
    /// Exclusive upper bound.
    pub end: u64,
    pub count: u64,
}

/// Equal-width histogram over `[0, max]` with at most `n_buckets` buckets.
pub fn length_histogram(counts: &[u64], n_buckets: usize) -> Vec<Bucket> {
    let max = counts.iter().copied().max().unwrap_or(0);
    let n = n_buckets.max(1) as u64;
    let width = (max + 1).div_ceil(n).max(1);
    let used = (max + 1).div_ceil(width);
    let mut buckets: Vec<Bucket> = (0..used)
        .map(|i| Bucket {
            start: i * width,
            end: (i + 1) * width,
            count: 0,
        })
        .collect();
    for &c in counts {
        buckets[(c / width) as usize].count += 1;
    }
    buckets
}

pub fn histogram_csv(buckets: &[Bucket]) -> String {
    let mut out = String::from("bucket_start,bucket_end,count\n");
    for b in buckets {
        writeln!(out, "{},{},{}", b.start, b.end, b.count).unwrap();
    }
    out
}

/// Records and tokens per source label; unlabeled records count as
/// `unknown`. Rows are sorted by source name.
pub fn source_distribution_csv(corpus: &Corpus, token_counts: &[u64]) -> String {
    let mut dist: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for (doc, &n) in corpus.documents.iter().zip(token_counts) {
        let e = dist.entry(doc.source.as_deref().unwrap_or("unknown")).or_default();
        e.0 += 1;
        e.1 += n;
    }
    let mut out = String::from("source,records,tokens\n");
    for (src, (records, tokens)) in dist {
        writeln!(out, "{src},{records},{tokens}").unwrap();
    }
    out
}
