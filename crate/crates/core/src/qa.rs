//! Extractive QA datasets and answer metrics (SQuAD-style normalization).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

static ARTICLES: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(a|an|the)\b").expect("valid regex"));

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the as whole
/// words, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    let no_articles = ARTICLES.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn check_golds(golds: &[String]) -> Result<()> {
    if golds.is_empty() {
        return Err(invalid("no gold answers"));
    }
    Ok(())
}

/// 1 if the normalized prediction equals any normalized gold answer.
pub fn em(prediction: &str, golds: &[String]) -> Result<u8> {
    check_golds(golds)?;
    let p = normalize_answer(prediction);
    Ok(golds.iter().any(|g| normalize_answer(g) == p) as u8)
}

fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p: Vec<&str> = prediction.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best token-overlap F1 against any gold answer.
pub fn f1(prediction: &str, golds: &[String]) -> Result<f64> {
    check_golds(golds)?;
    let p = normalize_answer(prediction);
    Ok(golds
        .iter()
        .map(|g| token_f1(&p, &normalize_answer(g)))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QADataset {
    pub examples: Vec<QAExample>,
    pub rejected: Vec<RejectedLine>,
}

pub fn parse_qa_dataset(text: &str) -> Result<QADataset> {
    let mut examples = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<QAExample>(line) {
            Ok(ex) if ex.answers.is_empty() => rejected.push(RejectedLine {
                line: i + 1,
                reason: "answers is empty".into(),
            }),
            Ok(ex) => examples.push(ex),
            Err(e) => rejected.push(RejectedLine {
                line: i + 1,
                reason: e.to_string(),
            }),
        }
    }
    for r in &rejected {
        log::warn!("dataset line {} rejected: {}", r.line, r.reason);
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} lines rejected",
            rejected.len()
        )));
    }
    Ok(QADataset { examples, rejected })
}

/// One JSON object per line with `id`, `context`, `question`, `answers`.
pub fn read_qa_dataset(path: impl AsRef<Path>) -> Result<QADataset> {
    parse_qa_dataset(&fs::read_to_string(path)?)
}

pub fn write_qa_dataset(examples: &[QAExample], path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub prediction: String,
    /// Path or key of the per-step diagnostics that produced the prediction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
    pub em: u8,
    pub f1: f64,
}

impl EvalRecord {
    pub fn score(
        id: &str,
        prediction: &str,
        golds: &[String],
        diagnostics: Option<String>,
    ) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            prediction: prediction.to_string(),
            diagnostics,
            em: em(prediction, golds)?,
            f1: f1(prediction, golds)?,
        })
    }
}
