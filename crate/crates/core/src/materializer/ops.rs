//! Operators that build intermediate tables. Each one generates the SQL
//! itself from planner-supplied parameters, persists the result, and records
//! one provenance node whose payload is the executed statement.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::semantic::{self, best_matches};
use crate::db::{DbError, DbService, ProbeResult, TableRef};
use crate::lm::{ChatRequest, LmError, LmService, UsageRecord};
use crate::model::{ColumnSpec, DeclaredType, ProvenanceGraph, TransformKind, TransformationRecord};
use crate::script::{run_script, ScriptError, ScriptLimits};
use crate::value::{quote_ident, Value};

#[derive(Debug, Error)]
pub enum OpError {
    #[error("join key {column} not found in {table}")]
    KeyNotFound { table: String, column: String },
    #[error("join key types differ: {left} is {left_type}, {right} is {right_type}")]
    TypeMismatch { left: String, left_type: DeclaredType, right: String, right_type: DeclaredType },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("column {column} not found in {table}")]
    ColumnNotFound { table: String, column: String },
    #[error("semantic join columns must be text: {0}")]
    NonTextColumns(String),
    #[error("invalid operator parameters: {0}")]
    InvalidParameters(String),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("provenance: {0}")]
    Provenance(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinType {
    #[default]
    Inner,
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnionMode {
    #[default]
    ByName,
    ByPosition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinKey {
    pub left: String,
    pub right: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticJoinConfig {
    pub left_cols: Vec<String>,
    pub right_cols: Vec<String>,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_p() -> usize {
    1
}

fn default_beta() -> f64 {
    semantic::DEFAULT_BETA
}

pub const DEFAULT_BATCH_SIZE: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticJoinOutput {
    pub table: TableRef,
    /// Embeddings failed and scores are syntactic only.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticColumnOutput {
    pub table: TableRef,
    /// Row ids whose generated value could not be coerced.
    pub flagged_rows: Vec<i64>,
    pub completions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryOutcome {
    Persisted(TableRef),
    Probe(ProbeResult),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptOutcome {
    pub tables: Vec<TableRef>,
    pub result: Option<crate::value::Relation>,
}

/// Operator context for one workspace.
pub struct Workbench<'a> {
    pub db: &'a Arc<DbService>,
    pub workspace_id: &'a str,
    pub lm: &'a LmService,
    pub graph: &'a mut ProvenanceGraph,
    pub usage: UsageRecord,
    pub script_limits: ScriptLimits,
}

fn find_col<'c>(cols: &'c [ColumnSpec], name: &str) -> Option<&'c ColumnSpec> {
    cols.iter().find(|c| c.name == name).or_else(|| cols.iter().find(|c| c.name.eq_ignore_ascii_case(name)))
}

fn comparable(a: DeclaredType, b: DeclaredType) -> bool {
    use DeclaredType::*;
    let class = |t| match t {
        Integer | Real | Boolean => 0,
        Text | Date | Timestamp => 1,
    };
    class(a) == class(b)
}

impl<'a> Workbench<'a> {
    pub fn new(db: &'a Arc<DbService>, workspace_id: &'a str, lm: &'a LmService, graph: &'a mut ProvenanceGraph) -> Self {
        Self { db, workspace_id, lm, graph, usage: UsageRecord::default(), script_limits: ScriptLimits::default() }
    }

    fn columns(&self, table: &str) -> Result<Vec<ColumnSpec>, OpError> {
        Ok(self.db.table_columns(self.workspace_id, table)?)
    }

    /// Persist `select` as `output` and record it.
    pub fn persist(&mut self, label: &str, select: &str, output: &str) -> Result<TableRef, OpError> {
        let p = self.db.persist_as_table(self.workspace_id, select, output)?;
        self.graph
            .add_transformation(TransformationRecord {
                label: label.to_string(),
                payload: p.statement.clone(),
                payload_kind: TransformKind::Sql,
                output_ref: output.to_string(),
                inputs: p.inputs.clone(),
                shares_payload_with: None,
            })
            .map_err(|e| OpError::Provenance(e.to_string()))?;
        Ok(p.table)
    }

    pub fn join_sql(&self, left: &str, right: &str, keys: &[JoinKey], join_type: JoinType) -> Result<String, OpError> {
        if keys.is_empty() {
            return Err(OpError::InvalidParameters("join needs at least one key pair".into()));
        }
        let lc = self.columns(left)?;
        let rc = self.columns(right)?;
        let mut on = Vec::new();
        for k in keys {
            let l = find_col(&lc, &k.left).ok_or_else(|| OpError::KeyNotFound { table: left.into(), column: k.left.clone() })?;
            let r = find_col(&rc, &k.right).ok_or_else(|| OpError::KeyNotFound { table: right.into(), column: k.right.clone() })?;
            if !comparable(l.declared_type, r.declared_type) {
                return Err(OpError::TypeMismatch {
                    left: format!("{left}.{}", l.name),
                    left_type: l.declared_type,
                    right: format!("{right}.{}", r.name),
                    right_type: r.declared_type,
                });
            }
            on.push(format!("l.{} = r.{}", quote_ident(&l.name), quote_ident(&r.name)));
        }
        let select = output_columns(&lc, &rc);
        let kw = match join_type {
            JoinType::Inner => "INNER JOIN",
            JoinType::Left => "LEFT JOIN",
        };
        Ok(format!(
            "SELECT {select} FROM {} AS l {kw} {} AS r ON {}",
            quote_ident(left),
            quote_ident(right),
            on.join(" AND ")
        ))
    }

    pub fn join(&mut self, left: &str, right: &str, keys: &[JoinKey], join_type: JoinType, output: &str) -> Result<TableRef, OpError> {
        let sql = self.join_sql(left, right, keys, join_type)?;
        self.persist(&format!("join {left} + {right}"), &sql, output)
    }

    pub fn union_sql(&self, inputs: &[String], mode: UnionMode) -> Result<String, OpError> {
        if inputs.len() < 2 {
            return Err(OpError::InvalidParameters("union needs at least two inputs".into()));
        }
        let first = self.columns(&inputs[0])?;
        let mut parts = Vec::with_capacity(inputs.len());
        for t in inputs {
            let cols = self.columns(t)?;
            match mode {
                UnionMode::ByPosition => {
                    if cols.len() != first.len() {
                        return Err(OpError::SchemaMismatch(format!(
                            "{t} has {} columns, {} has {}",
                            cols.len(),
                            inputs[0],
                            first.len()
                        )));
                    }
                    parts.push(format!("SELECT * FROM {}", quote_ident(t)));
                }
                UnionMode::ByName => {
                    if cols.len() != first.len() {
                        return Err(OpError::SchemaMismatch(format!("{t} and {} have different column sets", inputs[0])));
                    }
                    let mut picked = Vec::with_capacity(first.len());
                    for c in &first {
                        let m = find_col(&cols, &c.name)
                            .ok_or_else(|| OpError::SchemaMismatch(format!("{t} has no column {}", c.name)))?;
                        picked.push(format!("{} AS {}", quote_ident(&m.name), quote_ident(&c.name)));
                    }
                    parts.push(format!("SELECT {} FROM {}", picked.join(", "), quote_ident(t)));
                }
            }
        }
        Ok(parts.join(" UNION ALL "))
    }

    pub fn union(&mut self, inputs: &[String], mode: UnionMode, output: &str) -> Result<TableRef, OpError> {
        let sql = self.union_sql(inputs, mode)?;
        let label = if inputs.len() > 3 {
            format!("union of {} tables ({}, ..., {})", inputs.len(), inputs[0], inputs[inputs.len() - 1])
        } else {
            format!("union {}", inputs.join(" + "))
        };
        self.persist(&label, &sql, output)
    }

    pub fn projection_sql(&self, input: &str, columns: &[String], renames: &BTreeMap<String, String>) -> Result<String, OpError> {
        if columns.is_empty() {
            return Err(OpError::InvalidParameters("projection needs at least one column".into()));
        }
        let cols = self.columns(input)?;
        let mut picked = Vec::new();
        for c in columns {
            let m = find_col(&cols, c).ok_or_else(|| OpError::ColumnNotFound { table: input.into(), column: c.clone() })?;
            let name = renames.get(c).unwrap_or(&m.name);
            picked.push(format!("{} AS {}", quote_ident(&m.name), quote_ident(name)));
        }
        Ok(format!("SELECT {} FROM {}", picked.join(", "), quote_ident(input)))
    }

    pub fn projection(&mut self, input: &str, columns: &[String], renames: &BTreeMap<String, String>, output: &str) -> Result<TableRef, OpError> {
        let sql = self.projection_sql(input, columns, renames)?;
        self.persist(&format!("projection of {input}"), &sql, output)
    }

    fn text_rows(&self, table: &str, cols: &[String]) -> Result<(Vec<i64>, Vec<String>), OpError> {
        let all = self.columns(table)?;
        let mut exprs = Vec::new();
        for c in cols {
            let m = find_col(&all, c).ok_or_else(|| OpError::ColumnNotFound { table: table.into(), column: c.clone() })?;
            if !matches!(m.declared_type, DeclaredType::Text) {
                return Err(OpError::NonTextColumns(format!("{table}.{} is {}", m.name, m.declared_type)));
            }
            exprs.push(format!("coalesce({}, '')", quote_ident(&m.name)));
        }
        if exprs.is_empty() {
            return Err(OpError::InvalidParameters(format!("no columns selected from {table}")));
        }
        let sql = format!("SELECT rowid, {} FROM {} ORDER BY rowid", exprs.join(" || ' ' || "), quote_ident(table));
        let rel = self.db.execute_query(self.workspace_id, &sql, None)?.relation;
        let mut ids = Vec::with_capacity(rel.rows.len());
        let mut texts = Vec::with_capacity(rel.rows.len());
        for r in rel.rows {
            ids.push(r[0].as_i64().unwrap_or_default());
            texts.push(r[1].render());
        }
        Ok((ids, texts))
    }

    fn embed_all(&mut self, texts: &[String]) -> Result<Vec<Vec<f64>>, LmError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(256) {
            let (v, u) = self.lm.embed(chunk)?;
            self.usage += u;
            out.extend(v.into_iter().map(|e| e.values));
        }
        Ok(out)
    }

    pub fn semantic_join(&mut self, left: &str, right: &str, cfg: &SemanticJoinConfig, output: &str) -> Result<SemanticJoinOutput, OpError> {
        if cfg.p == 0 {
            return Err(OpError::InvalidParameters("p must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&cfg.beta) {
            return Err(OpError::InvalidParameters("beta must lie in [0, 1]".into()));
        }
        let (l_ids, l_text) = self.text_rows(left, &cfg.left_cols)?;
        let (r_ids, r_text) = self.text_rows(right, &cfg.right_cols)?;
        let mut beta = cfg.beta;
        let mut degraded = false;
        let mut embeddings = None;
        if beta > 0.0 && !l_text.is_empty() && !r_text.is_empty() {
            match (self.embed_all(&l_text), self.embed_all(&r_text)) {
                (Ok(a), Ok(b)) => embeddings = Some((a, b)),
                (Err(e), _) | (_, Err(e)) => {
                    tracing::warn!(error = %e, "semantic join embeddings failed; scoring syntactically");
                    beta = 0.0;
                    degraded = true;
                }
            }
        }
        let matches = best_matches(
            &l_text,
            &r_text,
            embeddings.as_ref().map(|e| e.0.as_slice()),
            embeddings.as_ref().map(|e| e.1.as_slice()),
            beta,
            cfg.p,
        );
        let mut values = Vec::new();
        for (i, ms) in matches.iter().enumerate() {
            for (j, score) in ms {
                values.push(format!("({}, {}, {}, {})", l_ids[i], r_ids[*j], Value::Real(*score).sql_literal(), values.len()));
            }
        }
        let cte = if values.is_empty() {
            "m(l_row, r_row, match_score, ord) AS (SELECT NULL, NULL, NULL, NULL WHERE 0)".to_string()
        } else {
            format!("m(l_row, r_row, match_score, ord) AS (VALUES {})", values.join(", "))
        };
        let lc = self.columns(left)?;
        let rc = self.columns(right)?;
        let select = format!(
            "WITH {cte} SELECT {}, m.match_score AS match_score FROM m JOIN {} AS l ON l.rowid = m.l_row JOIN {} AS r ON r.rowid = m.r_row ORDER BY m.ord",
            output_columns(&lc, &rc),
            quote_ident(left),
            quote_ident(right)
        );
        let label = format!(
            "semantic_join {left} ~ {right} on ({}) ~ ({}), p={}, beta={}{}",
            cfg.left_cols.join(", "),
            cfg.right_cols.join(", "),
            cfg.p,
            beta,
            if degraded { " [degraded]" } else { "" }
        );
        let table = self.persist(&label, &select, output)?;
        Ok(SemanticJoinOutput { table, degraded })
    }

    pub fn semantic_column(
        &mut self,
        input: &str,
        new_column: &ColumnSpec,
        condition_columns: &[String],
        instruction: &str,
        batch_size: usize,
        output: &str,
    ) -> Result<SemanticColumnOutput, OpError> {
        let cols = self.columns(input)?;
        if find_col(&cols, &new_column.name).is_some() {
            return Err(OpError::InvalidParameters(format!("{input} already has a column {}", new_column.name)));
        }
        let mut picked = Vec::new();
        for c in condition_columns {
            let m = find_col(&cols, c).ok_or_else(|| OpError::ColumnNotFound { table: input.into(), column: c.clone() })?;
            picked.push(quote_ident(&m.name));
        }
        if picked.is_empty() {
            return Err(OpError::InvalidParameters("condition_columns is empty".into()));
        }
        let rows = self
            .db
            .execute_query(self.workspace_id, &format!("SELECT rowid, {} FROM {} ORDER BY rowid", picked.join(", "), quote_ident(input)), None)?
            .relation;
        let batch_size = batch_size.max(1);
        let mut generated: Vec<(i64, Value)> = Vec::with_capacity(rows.len());
        let mut flagged = Vec::new();
        let mut completions = 0;
        for batch in rows.rows.chunks(batch_size) {
            let listing: Vec<String> = batch
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let cells: Vec<String> = condition_columns.iter().zip(&r[1..]).map(|(c, v)| format!("{c}={}", v.render())).collect();
                    format!("{}. {}", i + 1, cells.join("; "))
                })
                .collect();
            let system = format!(
                "You generate values for a new table column.\nColumn: {} ({}) -- {}\nInstruction: {instruction}\n\
                 Reply with JSON {{\"values\": [...]}} holding exactly one value per row, in row order; use null when unknown.",
                new_column.name, new_column.declared_type, new_column.description
            );
            let req = ChatRequest::structured(system, format!("Rows:\n{}", listing.join("\n")), "column_values");
            let expected = batch.len();
            let (reply, c) = self.lm.complete_structured::<ColumnValues>(&req, |v| {
                if v.values.len() == expected {
                    Ok(())
                } else {
                    Err(format!("expected {expected} values, got {}", v.values.len()))
                }
            })?;
            completions += 1;
            self.usage += c.usage;
            for (row, v) in batch.iter().zip(reply.values) {
                let id = row[0].as_i64().unwrap_or_default();
                match semantic::coerce_generated(&v, new_column.declared_type) {
                    Some(val) => generated.push((id, val)),
                    None => {
                        flagged.push(id);
                        generated.push((id, Value::Null));
                    }
                }
            }
        }
        let cte = if generated.is_empty() {
            "g(rid, val) AS (SELECT NULL, NULL WHERE 0)".to_string()
        } else {
            let v: Vec<String> = generated.iter().map(|(id, val)| format!("({id}, {})", val.sql_literal())).collect();
            format!("g(rid, val) AS (VALUES {})", v.join(", "))
        };
        let cast = match new_column.declared_type {
            DeclaredType::Integer | DeclaredType::Boolean => "INTEGER",
            DeclaredType::Real => "REAL",
            _ => "TEXT",
        };
        let select = format!(
            "WITH {cte} SELECT t.*, CAST(g.val AS {cast}) AS {} FROM {} AS t LEFT JOIN g ON g.rid = t.rowid ORDER BY t.rowid",
            quote_ident(&new_column.name),
            quote_ident(input)
        );
        let label = format!("semantic_column {}.{}: {}", input, new_column.name, instruction);
        let table = self.persist(&label, &select, output)?;
        Ok(SemanticColumnOutput { table, flagged_rows: flagged, completions })
    }

    /// Free-form SQL: `CREATE TABLE x AS ...` or a select with `output`
    /// persists; a bare select is a read-only probe.
    pub fn query_exec(&mut self, sql: &str, output: Option<&str>, probe_limit: usize) -> Result<QueryOutcome, OpError> {
        if let Some((name, select)) = split_create_as(sql) {
            if output.is_some_and(|o| o != name) {
                return Err(OpError::InvalidParameters(format!("statement creates {name} but output names {}", output.unwrap_or_default())));
            }
            return Ok(QueryOutcome::Persisted(self.persist(&format!("query_exec {name}"), &select, &name)?));
        }
        match output {
            Some(o) => Ok(QueryOutcome::Persisted(self.persist(&format!("query_exec {o}"), sql, o)?)),
            None => Ok(QueryOutcome::Probe(self.db.execute_query(self.workspace_id, sql, Some(probe_limit))?)),
        }
    }

    pub fn script_exec(&mut self, body: &str) -> Result<ScriptOutcome, OpError> {
        let run = run_script(self.db, self.workspace_id, body, self.script_limits)?;
        let mut first: Option<String> = None;
        let mut tables = Vec::new();
        for p in &run.persisted {
            let node = self
                .graph
                .add_transformation(TransformationRecord {
                    label: format!("script_exec {}", p.table.table_id),
                    payload: body.to_string(),
                    payload_kind: TransformKind::Script,
                    output_ref: p.table.table_id.clone(),
                    inputs: p.inputs.clone(),
                    shares_payload_with: first.clone(),
                })
                .map_err(|e| OpError::Provenance(e.to_string()))?;
            first.get_or_insert(node);
            tables.push(p.table.clone());
        }
        Ok(ScriptOutcome { tables, result: run.result })
    }
}

#[derive(Debug, Deserialize)]
struct ColumnValues {
    values: Vec<serde_json::Value>,
}

/// All left columns, then right columns with clashing names prefixed
/// `right_`.
fn output_columns(lc: &[ColumnSpec], rc: &[ColumnSpec]) -> String {
    let mut used: Vec<String> = lc.iter().map(|c| c.name.to_lowercase()).collect();
    let mut out: Vec<String> = lc.iter().map(|c| format!("l.{}", quote_ident(&c.name))).collect();
    for c in rc {
        let mut name = c.name.clone();
        while used.contains(&name.to_lowercase()) || name.eq_ignore_ascii_case("match_score") {
            name = format!("right_{name}");
        }
        used.push(name.to_lowercase());
        out.push(format!("r.{} AS {}", quote_ident(&c.name), quote_ident(&name)));
    }
    out.join(", ")
}

/// `CREATE TABLE [main.]name AS select` → (name, select).
pub fn split_create_as(sql: &str) -> Option<(String, String)> {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    let re = RE.get_or_init(|| {
        regex::Regex::new(r#"(?is)^\s*create\s+table\s+(?:main\s*\.\s*)?(?:"([^"]+)"|`([^`]+)`|\[([^\]]+)\]|([A-Za-z_][A-Za-z0-9_]*))\s+as\s+(.+)$"#)
            .expect("static regex")
    });
    let c = re.captures(sql.trim())?;
    let name = c.get(1).or(c.get(2)).or(c.get(3)).or(c.get(4))?.as_str().to_string();
    let select = c.get(5)?.as_str().trim().trim_end_matches(';').trim().to_string();
    Some((name, select))
}
