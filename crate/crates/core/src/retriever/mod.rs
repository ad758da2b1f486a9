//! Table discovery: summary retrieval, content-aware rescoring and
//! identifier enumeration.
//!
//! `fused_retrieve` takes the top `4k` summary candidates, rescales their
//! hybrid scores to [0, 1], and blends them with a content score computed
//! from a corpus-wide keyword scan:
//!
//! ```text
//! damped(t, e)  = ln(1 + tf_cells + w_col * tf_colnames)
//! content(t)    = mean_e damped(t, e) / max_t' damped(t', e)
//! fused(t)      = alpha * minmax(summary(t)) + (1 - alpha) * content(t)
//! ```

mod entities;
mod index;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::db::{ContentScan, DbError, DbService, TableRef};
use crate::lm::{LmError, LmService, UsageRecord};

pub use entities::{extract_entities, heuristic_entities, sanitize, MAX_ENTITIES};
pub use index::{bm25_scores, hybrid_scores, summary_text, term_counts, tokenize, TableSummary, RRF_K};

const EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("retrieval index is empty")]
    IndexEmpty,
    #[error("{0} is not configured")]
    NotConfigured(&'static str),
    #[error("invalid retrieval query: {0}")]
    InvalidQuery(String),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("index storage: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverConfig {
    pub k: usize,
    /// Maximum retrieval queries per planner call, run in parallel.
    pub q: usize,
    /// Sample rows per summary.
    pub s: usize,
    pub alpha: f64,
    /// Weight of a column-name hit relative to a cell hit.
    pub w_col: f64,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self { k: 10, q: 3, s: 5, alpha: 0.5, w_col: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub text: String,
    pub k: usize,
    #[serde(default)]
    pub extracted_entities: Vec<String>,
}

impl RetrievalQuery {
    pub fn new(text: impl Into<String>, k: usize) -> Self {
        Self { text: text.into(), k, extracted_entities: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTable {
    pub table_id: String,
    pub fused_score: f64,
    pub summary_score: f64,
    pub content_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RetrievalResult {
    pub query: String,
    pub ranked: Vec<RankedTable>,
    #[serde(default)]
    pub entities: Vec<String>,
    /// Set when embeddings were unavailable and ranking is lexical only.
    #[serde(default)]
    pub degraded: bool,
    #[serde(default)]
    pub usage: UsageRecord,
}

impl RetrievalResult {
    pub fn table_ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|r| r.table_id.as_str()).collect()
    }
}

/// Persisted per-dataset summary index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub dataset_id: String,
    pub summaries: Vec<TableSummary>,
    pub degraded: bool,
}

/// Per-table content score from raw scan counts.
pub fn content_scores(scan: &ContentScan, w_col: f64) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = scan.tables.keys().map(|t| (t.clone(), 0.0)).collect();
    let nk = scan.keywords.len();
    if nk == 0 {
        return out;
    }
    for k in 0..nk {
        let damped: Vec<(&String, f64)> = scan
            .tables
            .iter()
            .map(|(t, hits)| {
                let h = hits[k];
                (t, (1.0 + h.tf_cells as f64 + w_col * h.tf_colnames as f64).ln())
            })
            .collect();
        let max = damped.iter().map(|d| d.1).fold(0.0, f64::max);
        if max == 0.0 {
            continue;
        }
        for (t, d) in damped {
            *out.get_mut(t).expect("table present") += d / max;
        }
    }
    for v in out.values_mut() {
        *v /= nk as f64;
    }
    out
}

/// Min-max scale; a constant input maps to all ones.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || hi == lo {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Blend summary candidates with content scores and keep the top `k`.
pub fn fuse(candidates: &[(String, f64)], content: &BTreeMap<String, f64>, alpha: f64, k: usize) -> Vec<RankedTable> {
    let raw: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    let norm = min_max(&raw);
    let mut ranked: Vec<RankedTable> = candidates
        .iter()
        .zip(norm)
        .map(|((id, s), n)| {
            let c = content.get(id).copied().unwrap_or(0.0);
            RankedTable { table_id: id.clone(), fused_score: alpha * n + (1.0 - alpha) * c, summary_score: *s, content_score: c }
        })
        .collect();
    ranked.sort_by(|a, b| b.fused_score.total_cmp(&a.fused_score).then_with(|| a.table_id.cmp(&b.table_id)));
    ranked.truncate(k);
    ranked
}

/// Retrieval service over the corpus indexes.
pub struct Retriever {
    db: Arc<DbService>,
    lm: LmService,
    pub config: RetrieverConfig,
    indexes: Arc<RwLock<HashMap<String, Arc<RetrievalIndex>>>>,
    dir: PathBuf,
}

impl Retriever {
    pub fn new(db: Arc<DbService>, lm: LmService, config: RetrieverConfig) -> Self {
        let dir = db.root().join("index");
        Self { db, lm, config, indexes: Arc::default(), dir }
    }

    pub fn lm(&self) -> &LmService {
        &self.lm
    }

    /// Same indexes, different model provider.
    pub fn with_lm(&self, lm: LmService) -> Self {
        Self { db: self.db.clone(), lm, config: self.config, indexes: self.indexes.clone(), dir: self.dir.clone() }
    }

    pub fn db(&self) -> &Arc<DbService> {
        &self.db
    }

    fn index_path(&self, dataset_id: &str) -> PathBuf {
        self.dir.join(format!("{dataset_id}.json"))
    }

    /// Summarize and embed every table of a dataset; persists the index.
    pub fn build_index(&self, dataset_id: &str) -> Result<Arc<RetrievalIndex>, RetrieverError> {
        let tables = self.db.dataset_tables(dataset_id)?;
        let mut summaries = Vec::with_capacity(tables.len());
        for t in &tables {
            let cols = self.db.corpus_columns(&t.table_id).unwrap_or_default();
            let sample = self.db.sample_rows(t, self.config.s)?;
            summaries.push(TableSummary::new(&t.table_id, &cols, &sample));
        }
        let mut degraded = false;
        for chunk in summaries.chunks_mut(EMBED_BATCH) {
            let texts: Vec<String> = chunk.iter().map(|s| s.summary_text.clone()).collect();
            match self.lm.embed(&texts) {
                Ok((vectors, _)) => {
                    for (s, v) in chunk.iter_mut().zip(vectors) {
                        s.embedding = Some(v);
                    }
                }
                Err(e) => {
                    warn!(error = %e, "embedding failed; index is lexical only");
                    degraded = true;
                }
            }
        }
        let ids: Vec<String> = tables.iter().map(|t| t.table_id.clone()).collect();
        self.db.warm_scan_cache(&ids)?;
        let index = Arc::new(RetrievalIndex { dataset_id: dataset_id.to_string(), summaries, degraded });
        std::fs::create_dir_all(&self.dir).map_err(|e| RetrieverError::Storage(e.to_string()))?;
        let json = serde_json::to_string(&*index).map_err(|e| RetrieverError::Storage(e.to_string()))?;
        std::fs::write(self.index_path(dataset_id), json).map_err(|e| RetrieverError::Storage(e.to_string()))?;
        info!(dataset = dataset_id, tables = index.summaries.len(), degraded, "index built");
        self.indexes.write().expect("index map poisoned").insert(dataset_id.to_string(), index.clone());
        Ok(index)
    }

    /// Loaded, persisted, or freshly built index; stale indexes are rebuilt.
    pub fn index(&self, dataset_id: &str) -> Result<Arc<RetrievalIndex>, RetrieverError> {
        if let Some(i) = self.indexes.read().expect("index map poisoned").get(dataset_id) {
            return Ok(i.clone());
        }
        if let Ok(text) = std::fs::read_to_string(self.index_path(dataset_id)) {
            if let Ok(idx) = serde_json::from_str::<RetrievalIndex>(&text) {
                if self.is_current(&idx)? {
                    let idx = Arc::new(idx);
                    self.indexes.write().expect("index map poisoned").insert(dataset_id.to_string(), idx.clone());
                    return Ok(idx);
                }
            }
        }
        self.build_index(dataset_id)
    }

    fn is_current(&self, idx: &RetrievalIndex) -> Result<bool, RetrieverError> {
        let tables = self.db.dataset_tables(&idx.dataset_id)?;
        Ok(tables.len() == idx.summaries.len()
            && tables.iter().zip(&idx.summaries).all(|(t, s)| t.table_id == s.table_id && t.column_names == s.columns))
    }

    fn summaries(&self, scope: &[String]) -> Result<(Vec<Arc<RetrievalIndex>>, bool), RetrieverError> {
        let mut out = Vec::new();
        let mut degraded = false;
        for d in scope {
            let idx = self.index(d)?;
            degraded |= idx.degraded;
            out.push(idx);
        }
        Ok((out, degraded))
    }

    /// Hybrid summary ranking; the top `4k` candidates.
    pub fn summary_retrieve(&self, rq: &RetrievalQuery, scope: &[String]) -> Result<Vec<(String, f64)>, RetrieverError> {
        Ok(self.summary_stage(rq, scope)?.0)
    }

    fn summary_stage(&self, rq: &RetrievalQuery, scope: &[String]) -> Result<(Vec<(String, f64)>, bool, UsageRecord), RetrieverError> {
        if rq.k == 0 {
            return Err(RetrieverError::InvalidQuery("k must be at least 1".into()));
        }
        let (indexes, mut degraded) = self.summaries(scope)?;
        let docs: Vec<&TableSummary> = indexes.iter().flat_map(|i| i.summaries.iter()).collect();
        if docs.is_empty() {
            return Err(RetrieverError::IndexEmpty);
        }
        let mut usage = UsageRecord::default();
        let q_emb = if degraded {
            None
        } else {
            match self.lm.embed(&[rq.text.clone()]) {
                Ok((mut v, u)) => {
                    usage += u;
                    Some(v.remove(0).values)
                }
                Err(e) => {
                    warn!(error = %e, "query embedding failed");
                    degraded = true;
                    None
                }
            }
        };
        let mut ranked = hybrid_scores(&rq.text, q_emb.as_deref(), &docs);
        ranked.truncate(4 * rq.k);
        Ok((ranked, degraded, usage))
    }

    /// Content scan over every table in scope, scored.
    pub fn content_stage(&self, entities: &[String], scope: &[String]) -> Result<BTreeMap<String, f64>, RetrieverError> {
        if entities.is_empty() {
            return Ok(BTreeMap::new());
        }
        let mut tables = Vec::new();
        for d in scope {
            tables.extend(self.db.dataset_tables(d)?.into_iter().map(|t| t.table_id));
        }
        let scan = self.db.content_scan(entities, Some(&tables))?;
        Ok(content_scores(&scan, self.config.w_col))
    }

    fn finish(&self, rq: &RetrievalQuery, scope: &[String], alpha: f64) -> Result<RetrievalResult, RetrieverError> {
        let (candidates, degraded, usage) = self.summary_stage(rq, scope)?;
        let content = self.content_stage(&rq.extracted_entities, scope)?;
        Ok(RetrievalResult {
            query: rq.text.clone(),
            ranked: fuse(&candidates, &content, alpha, rq.k),
            entities: rq.extracted_entities.clone(),
            degraded,
            usage,
        })
    }

    /// Full pipeline for one query. Entities are extracted unless the query
    /// already carries them.
    pub fn fused_retrieve(&self, rq: &mut RetrievalQuery, scope: &[String]) -> Result<RetrievalResult, RetrieverError> {
        self.fused_retrieve_with(rq, scope, self.config.alpha)
    }

    pub fn fused_retrieve_with(&self, rq: &mut RetrievalQuery, scope: &[String], alpha: f64) -> Result<RetrievalResult, RetrieverError> {
        let mut usage = UsageRecord::default();
        if rq.extracted_entities.is_empty() {
            let (e, u) = extract_entities(&self.lm, &rq.text);
            rq.extracted_entities = e;
            usage += u;
        }
        let mut r = self.finish(rq, scope, alpha)?;
        r.usage += usage;
        Ok(r)
    }

    /// Up to `q` queries: entity extraction runs in query order (it talks to
    /// the model), the retrieval stages in parallel.
    pub fn retrieve_many(&self, texts: &[String], k: usize, scope: &[String]) -> Vec<Result<RetrievalResult, RetrieverError>> {
        let mut queries: Vec<(RetrievalQuery, UsageRecord)> = texts
            .iter()
            .take(self.config.q)
            .map(|t| {
                let mut rq = RetrievalQuery::new(t.clone(), k);
                let (e, u) = extract_entities(&self.lm, t);
                rq.extracted_entities = e;
                (rq, u)
            })
            .collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = queries
                .iter_mut()
                .map(|(rq, u)| {
                    let (rq, u) = (&*rq, *u);
                    s.spawn(move || {
                        self.finish(rq, scope, self.config.alpha).map(|mut r| {
                            r.usage += u;
                            r
                        })
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("retrieval thread panicked")).collect()
        })
    }

    /// Full-match regex over table identifiers.
    pub fn enumerate(&self, pattern: &str, scope: Option<&[String]>) -> Result<Vec<TableRef>, RetrieverError> {
        Ok(self.db.enumerate_tables(pattern, scope)?)
    }

    /// Summary text of a corpus table, if indexed.
    pub fn summary_of(&self, table_id: &str) -> Option<String> {
        let map = self.indexes.read().expect("index map poisoned");
        map.values().flat_map(|i| i.summaries.iter()).find(|s| s.table_id == table_id).map(|s| s.summary_text.clone())
    }
}

/// A retrieval source beyond the local corpus.
pub trait ExternalSource: Send + Sync {
    fn name(&self) -> &'static str;
    fn search(&self, query: &str) -> Result<Vec<String>, RetrieverError>;
}

macro_rules! unconfigured_source {
    ($ty:ident, $name:literal) => {
        #[derive(Debug, Default)]
        pub struct $ty;

        impl ExternalSource for $ty {
            fn name(&self) -> &'static str {
                $name
            }

            fn search(&self, _query: &str) -> Result<Vec<String>, RetrieverError> {
                Err(RetrieverError::NotConfigured($name))
            }
        }
    };
}

unconfigured_source!(WebSearch, "web search");
unconfigured_source!(WebCrawl, "web crawl");
unconfigured_source!(KnowledgeStore, "knowledge store");
