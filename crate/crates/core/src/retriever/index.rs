//! Table summaries and the hybrid (BM25 + embedding) summary index.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::lm::{cosine, EmbeddingVector};
use crate::model::ColumnSpec;
use crate::value::{Relation, Value};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const RRF_K: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub table_id: String,
    pub summary_text: String,
    #[serde(default)]
    pub embedding: Option<EmbeddingVector>,
    pub lexical_terms: BTreeMap<String, u32>,
    /// Column names the summary was built from; a mismatch with the catalog
    /// marks the summary stale.
    pub columns: Vec<String>,
}

/// `table <id> | columns: a:integer,b:text | rows: 1, x | 2, y`
pub fn summary_text(table_id: &str, columns: &[ColumnSpec], sample: &Relation) -> String {
    let cols: Vec<String> = columns.iter().map(|c| format!("{}:{}", c.name, c.declared_type)).collect();
    let mut out = format!("table {table_id} | columns: {}", cols.join(","));
    if !sample.rows.is_empty() {
        let rows: Vec<String> = sample
            .rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|v| match v {
                        Value::Null => "NULL".to_string(),
                        other => other.render().replace(['|', '\n', '\r'], " "),
                    })
                    .collect::<Vec<_>>()
                    .join(", ")
            })
            .collect();
        out.push_str(" | rows: ");
        out.push_str(&rows.join(" | "));
    }
    out
}

/// Lowercase alphanumeric tokens; underscores and punctuation separate.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

pub fn term_counts(text: &str) -> BTreeMap<String, u32> {
    let mut m = BTreeMap::new();
    for t in tokenize(text) {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

impl TableSummary {
    pub fn new(table_id: &str, columns: &[ColumnSpec], sample: &Relation) -> Self {
        let summary_text = summary_text(table_id, columns, sample);
        Self {
            table_id: table_id.to_string(),
            lexical_terms: term_counts(&summary_text),
            summary_text,
            embedding: None,
            columns: columns.iter().map(|c| c.name.clone()).collect(),
        }
    }

    fn length(&self) -> f64 {
        self.lexical_terms.values().map(|&c| c as f64).sum()
    }
}

/// BM25 scores of `query` against every summary (same order).
pub fn bm25_scores(query: &str, docs: &[&TableSummary]) -> Vec<f64> {
    let n = docs.len() as f64;
    if docs.is_empty() {
        return Vec::new();
    }
    let avg_len = docs.iter().map(|d| d.length()).sum::<f64>() / n;
    let mut q_terms: Vec<String> = tokenize(query).collect();
    q_terms.sort();
    q_terms.dedup();
    let mut df: HashMap<&str, f64> = HashMap::new();
    for t in &q_terms {
        df.insert(t, docs.iter().filter(|d| d.lexical_terms.contains_key(t)).count() as f64);
    }
    docs.iter()
        .map(|d| {
            let len = d.length();
            q_terms
                .iter()
                .map(|t| {
                    let tf = *d.lexical_terms.get(t).unwrap_or(&0) as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let dft = df[t.as_str()];
                    let idf = (1.0 + (n - dft + 0.5) / (dft + 0.5)).ln();
                    let norm = if avg_len > 0.0 { len / avg_len } else { 1.0 };
                    idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
                })
                .sum()
        })
        .collect()
}

/// 1-based ranks of the documents with a positive score, best first; ties
/// by table id.
fn ranks(scores: &[f64], docs: &[&TableSummary]) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.0).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| docs[a].table_id.cmp(&docs[b].table_id)));
    let mut out = vec![None; scores.len()];
    for (r, i) in order.into_iter().enumerate() {
        out[i] = Some(r + 1);
    }
    out
}

/// Reciprocal-rank fusion of BM25 and embedding cosine over all docs,
/// sorted best first with ties by table id.
pub fn hybrid_scores(query: &str, query_embedding: Option<&[f64]>, docs: &[&TableSummary]) -> Vec<(String, f64)> {
    let lexical = bm25_scores(query, docs);
    let lex_rank = ranks(&lexical, docs);
    let emb_rank = match query_embedding {
        Some(q) => {
            let cos: Vec<f64> = docs
                .iter()
                .map(|d| d.embedding.as_ref().map(|e| cosine(q, &e.values)).unwrap_or(0.0))
                .collect();
            ranks(&cos, docs)
        }
        None => vec![None; docs.len()],
    };
    let mut out: Vec<(String, f64)> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let s = [lex_rank[i], emb_rank[i]].iter().flatten().map(|&r| 1.0 / (RRF_K + r as f64)).sum();
            (d.table_id.clone(), s)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}
