//! Builds the views of `T` through a bounded plan-and-act loop.
//!
//! Each iteration asks the model for a situational analysis plus the
//! remaining action sequence, then runs the actions in order. The first
//! failing action aborts the rest of the sequence; its error text is shown
//! to the next iteration's analysis.

mod ops;
mod replay;
pub mod semantic;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ops::{
    split_create_as, JoinKey, JoinType, OpError, QueryOutcome, ScriptOutcome, SemanticColumnOutput, SemanticJoinConfig,
    SemanticJoinOutput, UnionMode, Workbench, DEFAULT_BATCH_SIZE,
};
pub use replay::{replay_derivation, run_transformation, ReplayError};

use crate::context::{render_working_context, run_probes, ActionRecord, Probe};
use crate::db::DbService;
use crate::lm::{ChatRequest, LmError, UsageRecord};
use crate::model::{ColumnSpec, ProvenanceGraph, TargetModel, ViewSpec, ViewStatus};
use crate::retriever::{RetrievalQuery, RetrievalResult, Retriever};
use crate::script::ScriptLimits;

pub const DEFAULT_M: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializerTask {
    pub target: TargetModel,
    #[serde(default)]
    pub guidance: Option<String>,
    #[serde(default)]
    pub shared_context: Vec<RetrievalResult>,
}

#[derive(Debug, Clone, Copy)]
pub struct MaterializerConfig {
    pub m: usize,
    pub script_limits: ScriptLimits,
}

impl Default for MaterializerConfig {
    fn default() -> Self {
        Self { m: DEFAULT_M, script_limits: ScriptLimits::default() }
    }
}

/// A retrieval query, optionally with its literal keywords already chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QuerySpec {
    Text(String),
    WithEntities { text: String, entities: Vec<String> },
}

impl QuerySpec {
    pub fn text(&self) -> &str {
        match self {
            QuerySpec::Text(t) | QuerySpec::WithEntities { text: t, .. } => t,
        }
    }
}

fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_p() -> usize {
    1
}

fn default_beta() -> f64 {
    semantic::DEFAULT_BETA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaterializerAction {
    SituationalAnalysis {
        #[serde(default)]
        note: String,
    },
    Join {
        left: String,
        right: String,
        keys: Vec<JoinKey>,
        #[serde(default)]
        join_type: JoinType,
        #[serde(default)]
        output: Option<String>,
    },
    Union {
        #[serde(default)]
        inputs: Vec<String>,
        /// Full-match regex over visible table ids, expanded before the
        /// explicit inputs.
        #[serde(default)]
        pattern: Option<String>,
        #[serde(default)]
        mode: UnionMode,
        #[serde(default)]
        output: Option<String>,
    },
    Projection {
        input: String,
        columns: Vec<String>,
        #[serde(default)]
        renames: BTreeMap<String, String>,
        #[serde(default)]
        output: Option<String>,
    },
    SemanticJoin {
        left: String,
        right: String,
        left_cols: Vec<String>,
        right_cols: Vec<String>,
        #[serde(default = "default_p")]
        p: usize,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default)]
        output: Option<String>,
    },
    SemanticColumn {
        input: String,
        new_column: ColumnSpec,
        condition_columns: Vec<String>,
        instruction: String,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default)]
        output: Option<String>,
    },
    QueryExec {
        sql: String,
        #[serde(default)]
        output: Option<String>,
    },
    ScriptExec {
        script: String,
    },
    Retrieve {
        queries: Vec<QuerySpec>,
        #[serde(default)]
        k: Option<usize>,
    },
    Enumerate {
        pattern: String,
    },
    ContextExtract {
        probes: Vec<Probe>,
    },
}

impl MaterializerAction {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::SituationalAnalysis { .. } => "situational_analysis",
            Self::Join { .. } => "join",
            Self::Union { .. } => "union",
            Self::Projection { .. } => "projection",
            Self::SemanticJoin { .. } => "semantic_join",
            Self::SemanticColumn { .. } => "semantic_column",
            Self::QueryExec { .. } => "query_exec",
            Self::ScriptExec { .. } => "script_exec",
            Self::Retrieve { .. } => "retrieve",
            Self::Enumerate { .. } => "enumerate",
            Self::ContextExtract { .. } => "context_extract",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializerPlan {
    #[serde(default)]
    pub analysis: String,
    #[serde(default)]
    pub actions: Vec<MaterializerAction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterializeStatus {
    Complete,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterializeOutcome {
    /// Every view of the task's target, with status and refs updated.
    pub views: Vec<ViewSpec>,
    /// Provenance added by this task.
    pub delta: ProvenanceGraph,
    pub status: MaterializeStatus,
    pub iterations: usize,
    pub records: Vec<ActionRecord>,
    pub usage: UsageRecord,
    /// Retrievals issued by the materializer itself.
    pub retrieved: Vec<RetrievalResult>,
}

#[derive(Debug, Error)]
pub enum MaterializerError {
    #[error("target has no declared views to materialize")]
    NothingToMaterialize,
    #[error("materializer used all {} iterations; unmaterialized views: {}", .0.iterations, unmaterialized(&.0.views).join(", "))]
    IterationBudgetExhausted(Box<MaterializeOutcome>),
    #[error(transparent)]
    Lm(#[from] LmError),
}

pub fn unmaterialized(views: &[ViewSpec]) -> Vec<String> {
    views.iter().filter(|v| !v.is_materialized()).map(|v| v.view_id.clone()).collect()
}

/// Mark views whose table now exists in the workspace with every declared
/// column. Returns messages for tables named like a view that lack columns.
pub fn refresh_views(db: &DbService, workspace_id: &str, views: &mut [ViewSpec]) -> Vec<String> {
    let Ok(ws) = db.workspace(workspace_id) else { return Vec::new() };
    let mut problems = Vec::new();
    for v in views.iter_mut().filter(|v| !v.is_materialized()) {
        if !ws.intermediate_tables.iter().any(|t| t == &v.view_id) {
            continue;
        }
        let names: Vec<String> = match db.table_columns(workspace_id, &v.view_id) {
            Ok(cols) => cols.into_iter().map(|c| c.name).collect(),
            Err(_) => continue,
        };
        let missing = v.missing_columns(&names);
        if missing.is_empty() {
            v.status = ViewStatus::Materialized;
            v.materialized_ref = Some(v.view_id.clone());
        } else {
            problems.push(format!(
                "table {} exists but lacks view columns {}; the name is taken, so rebuild the view under a new view_id",
                v.view_id,
                missing.join(", ")
            ));
        }
    }
    problems
}

const SYSTEM_PROMPT: &str = "\
You materialize the target views of a data model from source tables.
Every iteration starts with a situational analysis of what is done and what remains, followed by the
sequence of actions still needed. Actions run in order; the first failure discards the rest and you see
its error next iteration.

Prefer structured, constrained operators. Use query_exec only when no operator fits, and script_exec
only as a last resort.

Structured operators (the application generates the SQL):
  join            {left, right, keys: [{left, right}], join_type: inner|left, output?}
  union           {inputs: [table, ...] and/or pattern: full-match regex over table ids, mode: by_name|by_position, output?}
  projection      {input, columns: [...], renames?: {column: new_name}, output?}
  semantic_join   {left, right, left_cols: [...], right_cols: [...], p?: matches per left row (1), beta?: cosine weight (0.7), output?}
  semantic_column {input, new_column: {name, declared_type, description}, condition_columns: [...], instruction, batch_size?, output?}
Free-form fallbacks:
  query_exec      {sql, output?}  CREATE TABLE name AS SELECT ... or a SELECT with output persists a table;
                                  a SELECT without output is a read-only probe returning at most 50 rows.
  script_exec     {script}        Rhai program; only execute_query(sql[, limit]), persist_as_table(sql, name)
                                  and sample_rows(table, n) reach the data.
Discovery:
  retrieve        {queries: [text, ...], k?}
  enumerate       {pattern}       full-match regex over table ids
  context_extract {probes: [{purpose, query}]}

declared_type is one of integer, real, text, boolean, date, timestamp.
Tables without an output name are called mat_<iteration>_<ordinal>. A view is materialized once a table
named exactly as its view_id exists with all of the view's columns.
Reply with JSON: {\"analysis\": \"...\", \"actions\": [{\"kind\": \"...\", ...}, ...]}";

/// Runs materializer tasks against one workspace.
pub struct Materializer<'a> {
    pub db: &'a Arc<DbService>,
    pub retriever: &'a Retriever,
    pub workspace_id: &'a str,
    /// Datasets retrieval and enumeration may search.
    pub scope: &'a [String],
    pub config: MaterializerConfig,
}

struct LoopState {
    views: Vec<ViewSpec>,
    records: Vec<ActionRecord>,
    usage: UsageRecord,
    retrieved: Vec<RetrievalResult>,
}

impl<'a> Materializer<'a> {
    pub fn system_prompt() -> &'static str {
        SYSTEM_PROMPT
    }

    /// The per-iteration user prompt.
    pub fn user_prompt(&self, task: &MaterializerTask, views: &[ViewSpec], records: &[ActionRecord], iteration: usize) -> String {
        let mut out = format!("Iteration {iteration} of {}.\n\nTarget model:\n", self.config.m);
        let mut t = task.target.clone();
        t.views = views.to_vec();
        out.push_str(&t.describe());
        out.push_str(&format!("\nViews still to materialize: {}\n", unmaterialized(views).join(", ")));
        if let Some(g) = &task.guidance {
            out.push_str(&format!("\nGuidance from the conductor:\n{g}\n"));
        }
        let mut seen = Vec::new();
        let mut ctx = String::new();
        for r in &task.shared_context {
            for t in &r.ranked {
                if seen.contains(&t.table_id) {
                    continue;
                }
                seen.push(t.table_id.clone());
                match self.retriever.summary_of(&t.table_id) {
                    Some(s) => ctx.push_str(&format!("- {}\n", s.replace('\n', "\n  "))),
                    None => ctx.push_str(&format!("- {}\n", t.table_id)),
                }
            }
        }
        if !ctx.is_empty() {
            out.push_str("\nRetrieved tables:\n");
            out.push_str(&ctx);
        }
        if let Ok(ws) = self.db.workspace(self.workspace_id) {
            if !ws.intermediate_tables.is_empty() {
                out.push_str("\nIntermediate tables in the workspace:\n");
                for name in &ws.intermediate_tables {
                    let cols = self.db.table_columns(self.workspace_id, name).unwrap_or_default();
                    let cols: Vec<String> = cols.iter().map(|c| format!("{} {}", c.name, c.declared_type)).collect();
                    out.push_str(&format!("- {name}({})\n", cols.join(", ")));
                }
            }
        }
        let wc = render_working_context(records);
        if !wc.is_empty() {
            out.push('\n');
            out.push_str(&wc);
        }
        out
    }

    pub fn materialize(&self, task: &MaterializerTask, graph: &mut ProvenanceGraph) -> Result<MaterializeOutcome, MaterializerError> {
        if task.target.declared_views().next().is_none() {
            return Err(MaterializerError::NothingToMaterialize);
        }
        let base = graph.clone();
        let lm = self.retriever.lm();
        let mut st = LoopState {
            views: task.target.views.clone(),
            records: Vec::new(),
            usage: UsageRecord::default(),
            retrieved: Vec::new(),
        };
        refresh_views(self.db, self.workspace_id, &mut st.views);
        let mut iterations = 0;
        while iterations < self.config.m && st.views.iter().any(|v| !v.is_materialized()) {
            iterations += 1;
            let it = iterations;
            let mut task_now = task.clone();
            task_now.shared_context.extend(st.retrieved.iter().cloned());
            let req = ChatRequest::structured(SYSTEM_PROMPT, self.user_prompt(&task_now, &st.views, &st.records, it), "materializer_plan");
            let plan = match lm.complete_structured::<MaterializerPlan>(&req, |_| Ok(())) {
                Ok((plan, c)) => {
                    st.usage += c.usage;
                    plan
                }
                Err(e @ LmError::StructureValidationFailed { .. }) => {
                    st.records.push(ActionRecord::failed(it, "situational_analysis", "unusable plan", e.to_string()));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            st.records.push(ActionRecord::ok(it, "situational_analysis", plan.analysis.clone()));
            if plan.actions.iter().all(|a| matches!(a, MaterializerAction::SituationalAnalysis { .. })) {
                st.records.push(ActionRecord::failed(it, "plan", "no actions proposed", "the plan must contain at least one action"));
                continue;
            }
            let mut wb = Workbench::new(self.db, self.workspace_id, lm, graph);
            wb.script_limits = self.config.script_limits;
            let mut ordinal = 0;
            for action in plan.actions.iter().filter(|a| !matches!(a, MaterializerAction::SituationalAnalysis { .. })) {
                ordinal += 1;
                let record = self.execute(&mut wb, &mut st, action, it, ordinal);
                let failed = record.error.is_some();
                st.records.push(record);
                if failed {
                    break;
                }
                for p in refresh_views(self.db, self.workspace_id, &mut st.views) {
                    if st.records.iter().any(|r| r.error.as_deref() == Some(p.as_str())) {
                        continue;
                    }
                    st.records.push(ActionRecord::failed(it, "check", "view check", p));
                }
                if st.views.iter().all(ViewSpec::is_materialized) {
                    break;
                }
            }
            st.usage += wb.usage;
        }
        let complete = st.views.iter().all(ViewSpec::is_materialized);
        let outcome = MaterializeOutcome {
            views: st.views,
            delta: graph.delta_since(&base),
            status: if complete { MaterializeStatus::Complete } else { MaterializeStatus::BudgetExhausted },
            iterations,
            records: st.records,
            usage: st.usage,
            retrieved: st.retrieved,
        };
        if complete {
            Ok(outcome)
        } else {
            Err(MaterializerError::IterationBudgetExhausted(Box::new(outcome)))
        }
    }

    fn execute(&self, wb: &mut Workbench<'_>, st: &mut LoopState, action: &MaterializerAction, it: usize, ord: usize) -> ActionRecord {
        let kind = action.kind();
        let name = |o: &Option<String>| o.clone().unwrap_or_else(|| format!("mat_{it}_{ord}"));
        let table_summary = |t: &crate::db::TableRef| format!("{} ({} rows; columns {})", t.table_id, t.row_count, t.column_names.join(", "));
        let result: Result<String, String> = match action {
            MaterializerAction::SituationalAnalysis { .. } => Ok(String::new()),
            MaterializerAction::Join { left, right, keys, join_type, output } => wb
                .join(left, right, keys, *join_type, &name(output))
                .map(|t| format!("joined {left} and {right} into {}", table_summary(&t)))
                .map_err(|e| e.to_string()),
            MaterializerAction::Union { inputs, pattern, mode, output } => (|| {
                let mut all = Vec::new();
                if let Some(p) = pattern {
                    let found = self.retriever.enumerate(p, Some(self.scope)).map_err(|e| e.to_string())?;
                    all.extend(found.into_iter().map(|t| t.table_id));
                }
                all.extend(inputs.iter().cloned());
                let t = wb.union(&all, *mode, &name(output)).map_err(|e| e.to_string())?;
                Ok(format!("union of {} tables into {}", all.len(), table_summary(&t)))
            })(),
            MaterializerAction::Projection { input, columns, renames, output } => wb
                .projection(input, columns, renames, &name(output))
                .map(|t| format!("projected {input} into {}", table_summary(&t)))
                .map_err(|e| e.to_string()),
            MaterializerAction::SemanticJoin { left, right, left_cols, right_cols, p, beta, output } => {
                let cfg = SemanticJoinConfig { left_cols: left_cols.clone(), right_cols: right_cols.clone(), p: *p, beta: *beta };
                wb.semantic_join(left, right, &cfg, &name(output))
                    .map(|o| {
                        let note = if o.degraded { " [embeddings unavailable; syntactic scores only]" } else { "" };
                        format!("semantic join of {left} and {right} into {}{note}", table_summary(&o.table))
                    })
                    .map_err(|e| e.to_string())
            }
            MaterializerAction::SemanticColumn { input, new_column, condition_columns, instruction, batch_size, output } => wb
                .semantic_column(input, new_column, condition_columns, instruction, *batch_size, &name(output))
                .map(|o| {
                    let mut s = format!("added {} to {input} as {}", new_column.name, table_summary(&o.table));
                    if !o.flagged_rows.is_empty() {
                        s.push_str(&format!("; {} rows could not be coerced and are null", o.flagged_rows.len()));
                    }
                    s
                })
                .map_err(|e| e.to_string()),
            MaterializerAction::QueryExec { sql, output } => match wb.query_exec(sql, output.as_deref(), crate::context::PROBE_ROW_LIMIT) {
                Ok(QueryOutcome::Persisted(t)) => Ok(format!("persisted {}", table_summary(&t))),
                Ok(QueryOutcome::Probe(p)) => {
                    let mut r = ActionRecord::ok(it, kind, format!("probe {}", sql.trim()));
                    r.probes.push(crate::context::ProbeOutcome {
                        purpose: "query_exec".into(),
                        query: sql.clone(),
                        result: Some(p),
                        error: None,
                    });
                    return r;
                }
                Err(e) => Err(e.to_string()),
            },
            MaterializerAction::ScriptExec { script } => wb
                .script_exec(script)
                .map(|o| {
                    let tables: Vec<String> = o.tables.iter().map(table_summary).collect();
                    let mut s = format!("script persisted {} table(s): {}", tables.len(), tables.join("; "));
                    if let Some(r) = &o.result {
                        s.push_str(&format!("\nresult:\n{}", r.render_table(20)));
                    }
                    s
                })
                .map_err(|e| e.to_string()),
            MaterializerAction::Retrieve { queries, k } => {
                let k = k.unwrap_or(10);
                let mut lines = Vec::new();
                let mut err = None;
                for q in queries {
                    let mut rq = RetrievalQuery::new(q.text(), k);
                    if let QuerySpec::WithEntities { entities, .. } = q {
                        rq.extracted_entities = entities.clone();
                    }
                    match self.retriever.fused_retrieve(&mut rq, self.scope) {
                        Ok(r) => {
                            st.usage += r.usage;
                            lines.push(format!("{:?} -> {}", q.text(), r.table_ids().join(", ")));
                            st.retrieved.push(r);
                        }
                        Err(e) => {
                            err = Some(e.to_string());
                            break;
                        }
                    }
                }
                match err {
                    Some(e) => Err(e),
                    None => Ok(lines.join("\n")),
                }
            }
            MaterializerAction::Enumerate { pattern } => self
                .retriever
                .enumerate(pattern, Some(self.scope))
                .map(|ts| {
                    let ids: Vec<String> = ts.iter().map(|t| format!("{} ({} rows)", t.table_id, t.row_count)).collect();
                    format!("{} tables match {pattern:?}: {}", ids.len(), ids.join(", "))
                })
                .map_err(|e| e.to_string()),
            MaterializerAction::ContextExtract { probes } => {
                let outcomes = run_probes(self.db, self.workspace_id, probes);
                let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
                let mut r = ActionRecord::ok(it, kind, format!("{} probes, {failed} failed", outcomes.len()));
                r.probes = outcomes;
                return r;
            }
        };
        match result {
            Ok(summary) => ActionRecord::ok(it, kind, summary),
            Err(e) => ActionRecord::failed(it, kind, describe(action), e),
        }
    }
}

fn describe(action: &MaterializerAction) -> String {
    serde_json::to_string(action).unwrap_or_else(|_| action.kind().to_string())
}
