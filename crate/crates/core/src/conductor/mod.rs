//! Session-level planning loop.
//!
//! A turn runs at most `c` iterations. Each iteration is one structured
//! completion (situational analysis plus an action sequence) followed by the
//! actions in order; `user_communicate` ends the turn. When the budget runs
//! out the conductor prompts once more for a forced summary that names every
//! view still unmaterialized.

mod session;

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use session::{ReplyKind, Session, TranscriptEntry, TurnReply};

use crate::context::{render_working_context, run_probes, ActionRecord, Probe, ProbeOutcome};
use crate::db::{DbError, DbService};
use crate::lm::{ChatRequest, LmError, LmService, UsageRecord};
use crate::materializer::{
    refresh_views, replay_derivation, run_transformation, unmaterialized, Materializer, MaterializerConfig, MaterializerError,
    MaterializerTask, QuerySpec, ReplayError,
};
use crate::model::{
    derivation_script, validate_model, DerivationError, Document, InformationNeed, ModelDiff, TargetModel, TransformationS,
    ViewSpec, Violation,
};
use crate::retriever::{RetrievalQuery, Retriever};
use crate::script::ScriptLimits;

pub const DEFAULT_C: usize = 10;
/// Cap on stored revisions per session; the oldest are dropped first.
pub const MAX_REVISIONS: usize = 100;
const ANSWER_ROWS: usize = 50;
const STATE_KEY: &str = "session";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub c: usize,
    pub m: usize,
    pub retrieve_k: usize,
    /// Ablation: no target model; answers come from ad hoc queries.
    pub direct_synthesis: bool,
    pub disable_context_extract: bool,
    #[serde(skip)]
    pub script_limits: ScriptLimits,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            c: DEFAULT_C,
            m: crate::materializer::DEFAULT_M,
            retrieve_k: 10,
            direct_synthesis: false,
            disable_context_extract: false,
            script_limits: ScriptLimits::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConductorError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("model update rejected: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    ValidationFailed(Vec<Violation>),
    #[error("unknown view {0}")]
    UnknownView(String),
    #[error("S reads views that are not materialized: {}", .0.join(", "))]
    ViewNotMaterialized(Vec<String>),
    #[error("no transformation S has been defined")]
    NoTransformation,
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Derivation(#[from] DerivationError),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("corrupt session state: {0}")]
    CorruptState(String),
}

/// Edits to `(T, S)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelEdit {
    #[serde(default)]
    pub add_views: Vec<ViewSpec>,
    #[serde(default)]
    pub modify_views: Vec<ViewSpec>,
    #[serde(default)]
    pub remove_views: Vec<String>,
    #[serde(default)]
    pub transformation: Option<TransformationS>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommunicationKind {
    Answer,
    Question,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConductorAction {
    SituationalAnalysis {
        #[serde(default)]
        note: String,
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
    ModelUpdate(ModelEdit),
    Materialize {
        #[serde(default)]
        guidance: Option<String>,
    },
    Executor {
        /// Ad hoc transformation; only accepted in direct-synthesis mode.
        #[serde(default)]
        transformation: Option<TransformationS>,
    },
    UserCommunicate {
        #[serde(default = "default_comm")]
        communication: CommunicationKind,
        text: String,
    },
}

fn default_comm() -> CommunicationKind {
    CommunicationKind::Answer
}

impl ConductorAction {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::SituationalAnalysis { .. } => "situational_analysis",
            Self::Retrieve { .. } => "retrieve",
            Self::Enumerate { .. } => "enumerate",
            Self::ContextExtract { .. } => "context_extract",
            Self::ModelUpdate(_) => "model_update",
            Self::Materialize { .. } => "materialize",
            Self::Executor { .. } => "executor",
            Self::UserCommunicate { .. } => "user_communicate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConductorPlan {
    #[serde(default)]
    pub analysis: String,
    #[serde(default)]
    pub actions: Vec<ConductorAction>,
}

const SYSTEM_PROMPT: &str = "\
You help a user get data answers from a corpus of tables. You maintain an explicit target model:
T, a set of view schemas (view_id plus typed, described columns), and S, one SQL query or Rhai script
over those views whose result answers the user's need.

Every iteration starts with a situational analysis, then the sequence of actions that remains:
  retrieve          {queries: [text, ...], k?}          ranked tables for each query
  enumerate         {pattern}                           every table whose id fully matches the regex
  context_extract   {probes: [{purpose, query}]}        read-only SQL probes, 50 rows each
  model_update      {add_views?, modify_views?, remove_views?, transformation?: {kind: sql|script, body, declared_inputs}}
  materialize       {guidance?}                         build the declared views of T
  executor          {}                                  run S over the materialized views
  user_communicate  {communication: answer|question, text}   ends the turn
Views are {view_id, columns: [{name, declared_type, description}]}; declared_type is one of integer,
real, text, boolean, date, timestamp. A materialized view cannot be rebuilt under the same view_id.
Answer only from results of executor. Ask a question when the need is ambiguous.
Reply with JSON: {\"analysis\": \"...\", \"actions\": [{\"kind\": \"...\", ...}, ...]}";

const DIRECT_SYSTEM_PROMPT: &str = "\
You help a user get data answers from a corpus of tables.

Every iteration starts with a situational analysis, then the sequence of actions that remains:
  retrieve          {queries: [text, ...], k?}
  enumerate         {pattern}
  context_extract   {probes: [{purpose, query}]}
  executor          {transformation: {kind: sql|script, body}}   run one query over source tables
  user_communicate  {communication: answer|question, text}       ends the turn
Reply with JSON: {\"analysis\": \"...\", \"actions\": [{\"kind\": \"...\", ...}, ...]}";

const ANSWER_PROMPT: &str = "\
Write a short answer to the user's question using only the result rows given. State the numbers exactly
as they appear. If the rows are empty, say that no matching data was found.";

const FORCED_PROMPT: &str = "\
The planning budget for this turn is used up. Summarize for the user what was found so far, what is
missing, and what they could ask next. Do not invent results that were not computed.";

/// Runs sessions over one store and retrieval index.
#[derive(Clone)]
pub struct Conductor {
    pub db: Arc<DbService>,
    pub retriever: Arc<Retriever>,
    pub config: PlannerConfig,
}

impl Conductor {
    pub fn new(db: Arc<DbService>, retriever: Arc<Retriever>, config: PlannerConfig) -> Self {
        Self { db, retriever, config }
    }

    /// Same store and indexes, another model provider.
    pub fn with_lm(&self, lm: LmService) -> Self {
        Self { db: self.db.clone(), retriever: Arc::new(self.retriever.with_lm(lm)), config: self.config }
    }

    pub fn lm(&self) -> &LmService {
        self.retriever.lm()
    }

    /// The planner's system prompt; disabled actions are not offered.
    pub fn system_prompt(&self) -> String {
        let base = if self.config.direct_synthesis { DIRECT_SYSTEM_PROMPT } else { SYSTEM_PROMPT };
        if !self.config.disable_context_extract {
            return base.to_string();
        }
        base.lines().filter(|l| !l.trim_start().starts_with("context_extract")).collect::<Vec<_>>().join("\n")
    }

    // ------------------------------------------------------------------
    // sessions

    pub fn create_session(&self, session_id: &str, datasets: &[String]) -> Result<Session, ConductorError> {
        let ws = self.db.open_workspace(session_id, datasets)?;
        let s = Session::new(session_id, ws.workspace_id, ws.attached_sources);
        self.save(&s)?;
        Ok(s)
    }

    pub fn load_session(&self, session_id: &str) -> Result<Session, ConductorError> {
        let text = match self.db.load_state(session_id, STATE_KEY) {
            Ok(Some(t)) => t,
            Ok(None) | Err(DbError::UnknownWorkspace(_)) => return Err(ConductorError::UnknownSession(session_id.into())),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&text).map_err(|e| ConductorError::CorruptState(e.to_string()))
    }

    /// Every stored session id.
    pub fn session_ids(&self) -> Result<Vec<String>, ConductorError> {
        let mut out = Vec::new();
        for ws in self.db.list_workspaces()? {
            if matches!(self.db.load_state(&ws, STATE_KEY), Ok(Some(_))) {
                out.push(ws);
            }
        }
        Ok(out)
    }

    pub fn save(&self, s: &Session) -> Result<(), ConductorError> {
        let json = serde_json::to_string(s).map_err(|e| ConductorError::CorruptState(e.to_string()))?;
        self.db.save_state(&s.workspace_id, STATE_KEY, &json)?;
        Ok(())
    }

    // ------------------------------------------------------------------
    // the loop

    /// One user turn.
    pub fn handle_message(&self, s: &mut Session, user_text: &str) -> Result<TurnReply, ConductorError> {
        let started = Instant::now();
        let usage_before = s.usage;
        s.turns += 1;
        let turn = s.turns;
        match &mut s.need {
            Some(n) => n.refine(user_text),
            None => s.need = Some(InformationNeed::new(user_text)),
        }
        s.transcript.push(TranscriptEntry::User { turn, text: user_text.to_string() });

        let mut used = match s.pending_question.take() {
            Some(_) => s.carried_iterations,
            None => 0,
        };
        s.carried_iterations = 0;
        let mut iterations = 0;

        while used < self.config.c {
            used += 1;
            iterations += 1;
            let it = used;
            let req = ChatRequest::structured(self.system_prompt(), self.user_prompt(s, it), "conductor_plan");
            let plan = match self.lm().complete_structured::<ConductorPlan>(&req, |_| Ok(())) {
                Ok((p, c)) => {
                    s.usage += c.usage;
                    p
                }
                Err(e @ LmError::StructureValidationFailed { .. }) => {
                    self.log(s, turn, ActionRecord::failed(it, "situational_analysis", "unusable plan", e.to_string()));
                    self.save(s)?;
                    continue;
                }
                Err(e) => return Err(self.fail_turn(s, turn, e.into())),
            };
            self.log(s, turn, ActionRecord::ok(it, "situational_analysis", plan.analysis.clone()));

            for action in plan.actions.iter().filter(|a| !matches!(a, ConductorAction::SituationalAnalysis { .. })) {
                if let ConductorAction::UserCommunicate { communication, text } = action {
                    self.log(s, turn, ActionRecord::ok(it, "user_communicate", text.clone()));
                    let reply = match communication {
                        CommunicationKind::Question => {
                            s.pending_question = Some(text.clone());
                            // the question iteration is refunded on resume
                            s.carried_iterations = it - 1;
                            self.finish(s, turn, ReplyKind::Question, text.clone(), iterations, started, usage_before)
                        }
                        CommunicationKind::Answer => {
                            let mut text = text.clone();
                            if let Some(a) = s.document.as_ref().and_then(|d| d.answer_text.clone()) {
                                if !text.contains(a.trim()) {
                                    text = format!("{}\n\n{}", text.trim_end(), a.trim());
                                }
                            }
                            self.finish(s, turn, ReplyKind::Answer, text, iterations, started, usage_before)
                        }
                    };
                    self.save(s)?;
                    return Ok(reply);
                }
                match self.execute(s, turn, it, action) {
                    Ok(record) => {
                        let failed = record.error.is_some();
                        self.log(s, turn, record);
                        if failed {
                            break;
                        }
                    }
                    Err(e) => return Err(self.fail_turn(s, turn, e)),
                }
            }
            self.save(s)?;
        }

        let text = self.forced_synthesis(s);
        let reply = self.finish(s, turn, ReplyKind::Forced, text, iterations, started, usage_before);
        self.save(s)?;
        Ok(reply)
    }

    fn log(&self, s: &mut Session, turn: usize, record: ActionRecord) {
        s.transcript.push(TranscriptEntry::Action { turn, record });
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        s: &mut Session,
        turn: usize,
        kind: ReplyKind,
        text: String,
        iterations: usize,
        started: Instant,
        usage_before: UsageRecord,
    ) -> TurnReply {
        let elapsed = started.elapsed();
        let llm_time = s.usage.wall_time.saturating_sub(usage_before.wall_time);
        let reply = TurnReply {
            text: text.clone(),
            kind,
            revision: s.model.revision,
            document_revision: s.document.as_ref().map(|d| d.produced_by),
            iterations,
            elapsed,
            llm_time,
        };
        s.transcript.push(TranscriptEntry::Reply { turn, kind, text, revision: s.model.revision });
        reply
    }

    /// Record a turn-ending failure so the user sees it, then persist.
    fn fail_turn(&self, s: &mut Session, turn: usize, e: ConductorError) -> ConductorError {
        s.transcript.push(TranscriptEntry::Reply {
            turn,
            kind: ReplyKind::Error,
            text: format!("The turn stopped: {e}"),
            revision: s.model.revision,
        });
        if let Err(save) = self.save(s) {
            tracing::error!(error = %save, "could not persist session after failure");
        }
        e
    }

    fn forced_synthesis(&self, s: &mut Session) -> String {
        let missing = if self.config.direct_synthesis { Vec::new() } else { unmaterialized(&s.model.views) };
        let mut user = format!("User need: {}\n\n", s.need.as_ref().map_or("", |n| n.text.as_str()));
        if !self.config.direct_synthesis {
            user.push_str(&s.model.describe());
        }
        if !missing.is_empty() {
            user.push_str(&format!("\nViews not materialized: {}\n", missing.join(", ")));
        }
        if let Some(d) = &s.document {
            user.push_str(&format!("\nLatest result (revision {}):\n{}\n", d.produced_by, d.relation().render_table(ANSWER_ROWS)));
        }
        let mut text = match self.lm().complete(&ChatRequest::free_text(FORCED_PROMPT, user)) {
            Ok(c) => {
                s.usage += c.usage;
                c.text.trim().to_string()
            }
            Err(e) => {
                tracing::warn!(error = %e, "forced synthesis completion failed");
                "I ran out of planning steps before finishing.".to_string()
            }
        };
        if !missing.is_empty() {
            text.push_str(&format!("\n\nNot materialized yet: {}.", missing.join(", ")));
        }
        text
    }

    /// Per-iteration user prompt: need, model, retrieved tables (ids and
    /// summaries only), and the working context.
    pub fn user_prompt(&self, s: &Session, iteration: usize) -> String {
        let mut out = format!("Iteration {iteration} of {}.\n\n", self.config.c);
        if let Some(n) = &s.need {
            out.push_str(&format!("Current need: {}\n", n.text));
            if n.history.len() > 1 {
                out.push_str("Conversation so far:\n");
                for h in &n.history {
                    out.push_str(&format!("  user: {h}\n"));
                }
            }
        }
        if !self.config.direct_synthesis {
            out.push_str("\nTarget model:\n");
            out.push_str(&s.model.describe());
        }
        if let Some(d) = &s.document {
            out.push_str(&format!(
                "\nLatest result (revision {}, {} rows):\n{}\n",
                d.produced_by,
                d.rows.len(),
                d.relation().render_table(20)
            ));
        }
        let mut seen: Vec<&str> = Vec::new();
        let mut ctx = String::new();
        for r in &s.retrieved {
            for t in &r.ranked {
                if seen.contains(&t.table_id.as_str()) {
                    continue;
                }
                seen.push(&t.table_id);
                let summary = self.retriever.summary_of(&t.table_id).unwrap_or_else(|| t.table_id.clone());
                ctx.push_str(&format!("- {}\n", summary.replace('\n', "\n  ")));
            }
        }
        if !ctx.is_empty() {
            out.push_str("\nRetrieved tables:\n");
            out.push_str(&ctx);
        }
        let records: Vec<ActionRecord> = s
            .transcript
            .iter()
            .filter_map(|e| match e {
                TranscriptEntry::Action { record, .. } if !record.kind.starts_with("materializer/") => Some(record.clone()),
                _ => None,
            })
            .collect();
        let wc = render_working_context(&records);
        if !wc.is_empty() {
            out.push('\n');
            out.push_str(&wc);
        }
        out
    }

    fn execute(&self, s: &mut Session, turn: usize, it: usize, action: &ConductorAction) -> Result<ActionRecord, ConductorError> {
        let kind = action.kind();
        let fail = |summary: &str, e: &dyn std::fmt::Display| Ok(ActionRecord::failed(it, kind, summary, e.to_string()));
        match action {
            ConductorAction::SituationalAnalysis { note } => Ok(ActionRecord::ok(it, kind, note.clone())),
            ConductorAction::Retrieve { queries, k } => {
                let k = k.unwrap_or(self.config.retrieve_k);
                let mut lines = Vec::new();
                for q in queries {
                    let mut rq = RetrievalQuery::new(q.text(), k);
                    if let QuerySpec::WithEntities { entities, .. } = q {
                        rq.extracted_entities = entities.clone();
                    }
                    match self.retriever.fused_retrieve(&mut rq, &s.datasets) {
                        Ok(r) => {
                            s.usage += r.usage;
                            lines.push(format!("{:?} -> {}", q.text(), r.table_ids().join(", ")));
                            s.retrieved.push(r);
                        }
                        Err(crate::retriever::RetrieverError::Lm(e)) => return Err(e.into()),
                        Err(e) => return fail(&format!("retrieve {:?}", q.text()), &e),
                    }
                }
                Ok(ActionRecord::ok(it, kind, lines.join("\n")))
            }
            ConductorAction::Enumerate { pattern } => match self.retriever.enumerate(pattern, Some(&s.datasets)) {
                Ok(ts) => {
                    let ids: Vec<String> = ts.iter().map(|t| format!("{} ({} rows)", t.table_id, t.row_count)).collect();
                    Ok(ActionRecord::ok(it, kind, format!("{} tables match {pattern:?}: {}", ids.len(), ids.join(", "))))
                }
                Err(e) => fail(&format!("enumerate {pattern:?}"), &e),
            },
            ConductorAction::ContextExtract { probes } => {
                if self.config.disable_context_extract {
                    return fail("context_extract", &"context_extract is disabled in this session");
                }
                let outcomes = self.context_extract(s, probes);
                let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
                let mut r = ActionRecord::ok(it, kind, format!("{} probes, {failed} failed", outcomes.len()));
                r.probes = outcomes;
                Ok(r)
            }
            ConductorAction::ModelUpdate(edit) => {
                if self.config.direct_synthesis {
                    return fail("model_update", &"the target model is disabled in direct-synthesis mode");
                }
                match self.model_update(s, edit) {
                    Ok(diff) => Ok(ActionRecord::ok(it, kind, describe_diff(&diff))),
                    Err(e @ (ConductorError::ValidationFailed(_) | ConductorError::UnknownView(_))) => fail("model_update", &e),
                    Err(e) => Err(e),
                }
            }
            ConductorAction::Materialize { guidance } => {
                if self.config.direct_synthesis {
                    return fail("materialize", &"the target model is disabled in direct-synthesis mode");
                }
                self.materialize(s, turn, it, guidance.clone())
            }
            ConductorAction::Executor { transformation } => {
                let result = match (transformation, self.config.direct_synthesis) {
                    (Some(t), true) => self.execute_adhoc(s, t),
                    (None, false) => self.execute_s(s),
                    (Some(_), false) => {
                        return fail("executor", &"S is set through model_update; executor takes no transformation")
                    }
                    (None, true) => return fail("executor", &"direct-synthesis executor needs a transformation"),
                };
                match result {
                    Ok(doc) => Ok(ActionRecord::ok(
                        it,
                        kind,
                        format!(
                            "{} rows\n{}\nanswer: {}",
                            doc.rows.len(),
                            doc.relation().render_table(20),
                            doc.answer_text.as_deref().unwrap_or("")
                        ),
                    )),
                    Err(ConductorError::Lm(e)) => Err(e.into()),
                    Err(e) => fail("executor", &e),
                }
            }
            ConductorAction::UserCommunicate { .. } => unreachable!("handled by the loop"),
        }
    }

    fn materialize(&self, s: &mut Session, turn: usize, it: usize, guidance: Option<String>) -> Result<ActionRecord, ConductorError> {
        if s.model.declared_views().next().is_none() {
            return Ok(ActionRecord::ok(it, "materialize", "every view is already materialized"));
        }
        let m = Materializer {
            db: &self.db,
            retriever: &self.retriever,
            workspace_id: &s.workspace_id,
            scope: &s.datasets,
            config: MaterializerConfig { m: self.config.m, script_limits: self.config.script_limits },
        };
        let task = MaterializerTask { target: s.model.clone(), guidance, shared_context: s.retrieved.clone() };
        let mut graph = std::mem::take(&mut s.provenance);
        let result = m.materialize(&task, &mut graph);
        s.provenance = graph;
        let (outcome, complete) = match result {
            Ok(o) => (o, true),
            Err(MaterializerError::IterationBudgetExhausted(o)) => (*o, false),
            Err(MaterializerError::NothingToMaterialize) => {
                return Ok(ActionRecord::ok(it, "materialize", "every view is already materialized"))
            }
            Err(MaterializerError::Lm(e)) => {
                self.sync_views(s);
                return Err(e.into());
            }
        };
        s.usage += outcome.usage;
        for mut r in outcome.records {
            r.kind = format!("materializer/{}", r.kind);
            self.log(s, turn, r);
        }
        s.retrieved.extend(outcome.retrieved);
        self.publish_views(s, outcome.views);
        let done: Vec<String> = s
            .model
            .views
            .iter()
            .filter(|v| v.is_materialized())
            .map(|v| format!("{} -> {}", v.view_id, v.materialized_ref.as_deref().unwrap_or("?")))
            .collect();
        let summary = format!(
            "{} materializer iterations, {} new transformations; materialized: {}",
            outcome.iterations,
            outcome.delta.transformation_count(),
            if done.is_empty() { "none".to_string() } else { done.join(", ") }
        );
        if complete {
            Ok(ActionRecord::ok(it, "materialize", summary))
        } else {
            let missing = unmaterialized(&s.model.views).join(", ");
            Ok(ActionRecord::failed(it, "materialize", summary, format!("iteration budget exhausted; still unmaterialized: {missing}")))
        }
    }

    /// Re-derive view status from the workspace (after an interrupted task).
    fn sync_views(&self, s: &mut Session) {
        let mut views = s.model.views.clone();
        refresh_views(&self.db, &s.workspace_id, &mut views);
        self.publish_views(s, views);
    }

    fn publish_views(&self, s: &mut Session, views: Vec<ViewSpec>) {
        if views == s.model.views {
            return;
        }
        let mut next = s.model.next_revision();
        next.views = views;
        self.publish(s, next);
    }

    fn publish(&self, s: &mut Session, model: TargetModel) {
        s.model = model.clone();
        s.revisions.push(model);
        if s.revisions.len() > MAX_REVISIONS {
            let excess = s.revisions.len() - MAX_REVISIONS;
            s.revisions.drain(..excess);
        }
    }

    // ------------------------------------------------------------------
    // planner actions, callable directly

    /// Run read-only probes with the probe row limit. Failures are data.
    pub fn context_extract(&self, s: &Session, probes: &[Probe]) -> Vec<ProbeOutcome> {
        run_probes(&self.db, &s.workspace_id, probes)
    }

    /// Apply an edit and publish the next revision.
    pub fn model_update(&self, s: &mut Session, edit: &ModelEdit) -> Result<ModelDiff, ConductorError> {
        let mut next = s.model.next_revision();
        for id in &edit.remove_views {
            let before = next.views.len();
            next.views.retain(|v| &v.view_id != id);
            if next.views.len() == before {
                return Err(ConductorError::UnknownView(id.clone()));
            }
        }
        for v in &edit.modify_views {
            let Some(slot) = next.views.iter_mut().find(|x| x.view_id == v.view_id) else {
                return Err(ConductorError::UnknownView(v.view_id.clone()));
            };
            if slot.columns != v.columns {
                *slot = ViewSpec::declared(v.view_id.clone(), v.columns.clone());
            }
        }
        for v in &edit.add_views {
            next.views.push(ViewSpec::declared(v.view_id.clone(), v.columns.clone()));
        }
        if let Some(t) = &edit.transformation {
            next.transformation = Some(t.clone());
        }
        let violations = validate_model(&next);
        if !violations.is_empty() {
            return Err(ConductorError::ValidationFailed(violations));
        }
        refresh_views(&self.db, &s.workspace_id, &mut next.views);
        let diff = ModelDiff::between(&s.model, &next);
        self.publish(s, next);
        Ok(diff)
    }

    /// Execute S over the materialized views and synthesize the answer text.
    pub fn execute_s(&self, s: &mut Session) -> Result<Document, ConductorError> {
        let t = s.model.transformation.clone().ok_or(ConductorError::NoTransformation)?;
        let missing: Vec<String> = t
            .declared_inputs
            .iter()
            .filter(|i| !s.model.view(i).is_some_and(ViewSpec::is_materialized))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(ConductorError::ViewNotMaterialized(missing));
        }
        self.run_and_answer(s, &t)
    }

    fn execute_adhoc(&self, s: &mut Session, t: &TransformationS) -> Result<Document, ConductorError> {
        let doc = self.run_and_answer(s, t)?;
        s.adhoc = Some(t.clone());
        Ok(doc)
    }

    fn run_and_answer(&self, s: &mut Session, t: &TransformationS) -> Result<Document, ConductorError> {
        let (rel, ordered) = run_transformation(&self.db, &s.workspace_id, t, self.config.script_limits)?;
        let mut doc = Document::from_relation(rel, s.model.revision, ordered);
        let user = format!(
            "Question: {}\n\nResult ({} rows):\n{}",
            s.need.as_ref().map_or("", |n| n.text.as_str()),
            doc.rows.len(),
            doc.relation().render_table(ANSWER_ROWS)
        );
        let c = self.lm().complete(&ChatRequest::free_text(ANSWER_PROMPT, user))?;
        s.usage += c.usage;
        doc.answer_text = Some(c.text.trim().to_string());
        s.document = Some(doc.clone());
        Ok(doc)
    }

    /// S, or in direct-synthesis mode the last ad hoc transformation.
    fn final_transformation<'s>(&self, s: &'s Session) -> Result<&'s TransformationS, ConductorError> {
        s.model.transformation.as_ref().or(s.adhoc.as_ref()).ok_or(ConductorError::NoTransformation)
    }

    /// The derivation script for the session's current S.
    pub fn derivation_script(&self, s: &Session) -> Result<String, ConductorError> {
        let t = self.final_transformation(s)?;
        Ok(derivation_script(&s.provenance, t)?)
    }

    /// Replay the derivation script into a scratch workspace and compare
    /// with the session's Document.
    pub fn verify_replay(&self, s: &Session) -> Result<bool, ConductorError> {
        let Some(doc) = &s.document else { return Ok(false) };
        let t = self.final_transformation(s)?;
        let script = derivation_script(&s.provenance, t)?;
        let scratch = format!("{}_replay", s.workspace_id);
        if self.db.workspace(&scratch).is_ok() {
            self.db.drop_workspace(&scratch)?;
        }
        self.db.open_workspace(&scratch, &s.datasets)?;
        let replayed = replay_derivation(&self.db, &scratch, &script, t.kind, doc.produced_by, self.config.script_limits);
        self.db.drop_workspace(&scratch)?;
        Ok(doc.same_rows(&replayed?))
    }
}

fn describe_diff(d: &ModelDiff) -> String {
    let mut parts = vec![format!("revision {} -> {}", d.from_revision, d.to_revision)];
    if !d.added_views.is_empty() {
        parts.push(format!("added {}", d.added_views.join(", ")));
    }
    if !d.removed_views.is_empty() {
        parts.push(format!("removed {}", d.removed_views.join(", ")));
    }
    if !d.changed_views.is_empty() {
        parts.push(format!("changed {}", d.changed_views.join(", ")));
    }
    if d.transformation_changed {
        parts.push("S changed".into());
    }
    if d.is_empty() {
        parts.push("no changes".into());
    }
    parts.join("; ")
}

impl Session {
    /// Iterations (situational analyses) recorded for a turn.
    pub fn iterations_in_turn(&self, turn: usize) -> usize {
        self.transcript
            .iter()
            .filter(|e| matches!(e, TranscriptEntry::Action { turn: t, record } if *t == turn && record.kind == "situational_analysis"))
            .count()
    }

    pub fn revision(&self, revision: u64) -> Option<&TargetModel> {
        self.revisions.iter().find(|m| m.revision == revision)
    }
}
