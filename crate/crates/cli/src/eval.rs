//! Question/answer evaluation: suite parsing, answer extraction and scoring.
//!
//! The produced answer is read from the session's Document: the column named
//! `answer` when present, otherwise the first column. Scalars compare as
//! strings after normalization; set-valued answers score by F1.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use quarry_core::model::Document;
use quarry_core::value::Value;

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Expected {
    Set(Vec<serde_yaml::Value>),
    Scalar(serde_yaml::Value),
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct SuiteItem {
    #[serde(default)]
    pub id: Option<String>,
    pub question: String,
    pub dataset: String,
    pub expected: Expected,
    /// Scripted trace file, relative to the suite file.
    #[serde(default)]
    pub trace: Option<PathBuf>,
}

pub fn load_suite(path: &Path) -> anyhow::Result<Vec<SuiteItem>> {
    let text = std::fs::read_to_string(path)?;
    let mut items: Vec<SuiteItem> = serde_yaml::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for (i, it) in items.iter_mut().enumerate() {
        if it.id.is_none() {
            it.id = Some(format!("q{}", i + 1));
        }
        if let Some(t) = &it.trace {
            if t.is_relative() {
                it.trace = Some(base.join(t));
            }
        }
    }
    Ok(items)
}

fn number_word(w: &str) -> Option<usize> {
    const WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];
    w.parse().ok().or_else(|| WORDS.iter().position(|x| *x == w))
}

/// Decimal places the question asks for ("round ... to 4 decimal places").
pub fn stated_decimals(question: &str) -> Option<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?i)round\w*\b[^.?!]*?\bto\s+(?:the\s+)?(\w+)\s+decimal(?:\s+places?|s)?").expect("valid regex")
    });
    re.captures(question).and_then(|c| number_word(&c[1].to_lowercase()))
}

/// Canonical text of an answer value; numbers are rounded to `decimals`
/// when given, integers lose any trailing `.0`.
pub fn normalize(raw: &str, decimals: Option<usize>) -> String {
    let t = raw.trim();
    let cleaned = t.replace(',', "");
    if let Ok(x) = cleaned.parse::<f64>() {
        if let Some(d) = decimals {
            let s = format!("{x:.d$}");
            return if s.starts_with('-') && s.trim_start_matches(['-', '0', '.']).is_empty() { s[1..].to_string() } else { s };
        }
        if x.fract() == 0.0 && x.abs() < 1e15 {
            return format!("{}", x as i64);
        }
        return format!("{x}");
    }
    t.to_lowercase()
}

fn yaml_text(v: &serde_yaml::Value) -> String {
    match v {
        serde_yaml::Value::String(s) => s.clone(),
        serde_yaml::Value::Number(n) => n.to_string(),
        serde_yaml::Value::Bool(b) => b.to_string(),
        serde_yaml::Value::Null => String::new(),
        other => serde_yaml::to_string(other).unwrap_or_default().trim().to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1(expected: &BTreeSet<String>, produced: &BTreeSet<String>) -> F1 {
    if expected.is_empty() && produced.is_empty() {
        return F1 { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    let hit = expected.intersection(produced).count() as f64;
    let precision = if produced.is_empty() { 0.0 } else { hit / produced.len() as f64 };
    let recall = if expected.is_empty() { 0.0 } else { hit / expected.len() as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    F1 { precision, recall, f1 }
}

/// Values of the designated answer column.
pub fn answer_values(doc: &Document) -> Vec<Value> {
    let col = doc.schema.iter().position(|c| c.name.eq_ignore_ascii_case("answer")).unwrap_or(0);
    doc.rows.iter().filter_map(|r| r.get(col).cloned()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Score {
    /// 1/0 for scalars, F1 for sets.
    pub score: f64,
    pub correct: bool,
    pub produced: String,
    pub expected: String,
}

pub fn score(question: &str, expected: &Expected, doc: Option<&Document>) -> Score {
    let decimals = stated_decimals(question);
    let values: Vec<String> = doc.map(answer_values).unwrap_or_default().iter().map(|v| normalize(&v.render(), decimals)).collect();
    match expected {
        Expected::Scalar(e) => {
            let e = normalize(&yaml_text(e), decimals);
            let produced = if values.len() == 1 { values[0].clone() } else { values.join("; ") };
            let correct = values.len() == 1 && values[0] == e;
            Score { score: if correct { 1.0 } else { 0.0 }, correct, produced, expected: e }
        }
        Expected::Set(items) => {
            let e: BTreeSet<String> = items.iter().map(|v| normalize(&yaml_text(v), decimals)).collect();
            let p: BTreeSet<String> = values.into_iter().collect();
            let s = f1(&e, &p);
            Score {
                score: s.f1,
                correct: s.f1 == 1.0,
                produced: p.into_iter().collect::<Vec<_>>().join("; "),
                expected: e.into_iter().collect::<Vec<_>>().join("; "),
            }
        }
    }
}
