//! Similarity scoring for semantic joins and value coercion for generated
//! columns.

use std::collections::HashSet;

use crate::lm::cosine;
use crate::model::DeclaredType;
use crate::value::Value;

pub const DEFAULT_BETA: f64 = 0.7;
pub const EXHAUSTIVE_PAIR_LIMIT: usize = 1_000_000;
pub const PREFILTER_TOP: usize = 50;

/// Case-folded character 3-grams. Strings shorter than three characters are
/// a single gram.
pub fn trigrams(s: &str) -> HashSet<String> {
    let chars: Vec<char> = s.to_lowercase().chars().collect();
    if chars.len() < 3 {
        return std::iter::once(chars.into_iter().collect()).collect();
    }
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

/// Jaccard overlap of trigram sets; identical strings score 1.
pub fn trigram_similarity(a: &str, b: &str) -> f64 {
    if a.to_lowercase() == b.to_lowercase() {
        return 1.0;
    }
    let (ta, tb) = (trigrams(a), trigrams(b));
    let inter = ta.intersection(&tb).count();
    let union = ta.len() + tb.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn match_score(beta: f64, emb_a: Option<&[f64]>, emb_b: Option<&[f64]>, a: &str, b: &str) -> f64 {
    let cos = match (emb_a, emb_b) {
        (Some(x), Some(y)) if beta > 0.0 => cosine(x, y),
        _ => 0.0,
    };
    beta * cos + (1.0 - beta) * trigram_similarity(a, b)
}

/// For each left text, the indices and scores of its top `p` right texts
/// (ties by right order). Past [`EXHAUSTIVE_PAIR_LIMIT`] pairs only the
/// [`PREFILTER_TOP`] nearest right rows by cosine are scored.
pub fn best_matches(
    left: &[String],
    right: &[String],
    left_emb: Option<&[Vec<f64>]>,
    right_emb: Option<&[Vec<f64>]>,
    beta: f64,
    p: usize,
) -> Vec<Vec<(usize, f64)>> {
    let exhaustive = left.len().saturating_mul(right.len()) <= EXHAUSTIVE_PAIR_LIMIT || left_emb.is_none() || beta == 0.0;
    left.iter()
        .enumerate()
        .map(|(i, l)| {
            let le = left_emb.map(|e| e[i].as_slice());
            let candidates: Vec<usize> = if exhaustive {
                (0..right.len()).collect()
            } else {
                let re = right_emb.expect("embeddings present when prefiltering");
                let le = le.expect("embeddings present when prefiltering");
                let mut by_cos: Vec<(usize, f64)> = re.iter().enumerate().map(|(j, r)| (j, cosine(le, r))).collect();
                by_cos.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let mut c: Vec<usize> = by_cos.into_iter().take(PREFILTER_TOP).map(|x| x.0).collect();
                c.sort_unstable();
                c
            };
            let mut scored: Vec<(usize, f64)> = candidates
                .into_iter()
                .map(|j| (j, match_score(beta, le, right_emb.map(|e| e[j].as_slice()), l, &right[j])))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.truncate(p);
            scored
        })
        .collect()
}

/// Coerce a generated JSON value to a column type; `None` means the value
/// could not be coerced (stored as null and flagged).
pub fn coerce_generated(v: &serde_json::Value, ty: DeclaredType) -> Option<Value> {
    use serde_json::Value as J;
    if v.is_null() {
        return Some(Value::Null);
    }
    let text = match v {
        J::String(s) => s.trim().to_string(),
        other => other.to_string(),
    };
    match ty {
        DeclaredType::Integer => match v {
            J::Number(n) => n.as_i64().or_else(|| n.as_f64().filter(|f| f.fract() == 0.0 && f.abs() < 9e15).map(|f| f as i64)),
            _ => text.parse().ok(),
        }
        .map(Value::Integer),
        DeclaredType::Real => match v {
            J::Number(n) => n.as_f64(),
            _ => text.parse::<f64>().ok().filter(|f| f.is_finite()),
        }
        .map(Value::Real),
        DeclaredType::Boolean => match v {
            J::Bool(b) => Some(*b),
            J::Number(n) if n.as_i64() == Some(0) || n.as_i64() == Some(1) => Some(n.as_i64() == Some(1)),
            _ => match text.to_ascii_lowercase().as_str() {
                "true" | "yes" => Some(true),
                "false" | "no" => Some(false),
                _ => None,
            },
        }
        .map(|b| Value::Integer(b as i64)),
        DeclaredType::Date => chrono::NaiveDate::parse_from_str(&text, "%Y-%m-%d").ok().map(|_| Value::Text(text)),
        DeclaredType::Timestamp => {
            let ok = chrono::DateTime::parse_from_rfc3339(&text).is_ok()
                || chrono::NaiveDateTime::parse_from_str(&text, "%Y-%m-%dT%H:%M:%S%.f").is_ok()
                || chrono::NaiveDateTime::parse_from_str(&text, "%Y-%m-%d %H:%M:%S%.f").is_ok();
            ok.then_some(Value::Text(text))
        }
        DeclaredType::Text => Some(Value::Text(text)),
    }
}
