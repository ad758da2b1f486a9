//! HTTP service over quarry sessions.
//!
//! Session state lives in each session's workspace database, so every read
//! endpoint loads it from there and a restarted service sees the same
//! sessions. Turns run on the blocking pool; a session accepts one turn at
//! a time and answers 409 to a second.

mod config;
mod error;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use quarry_core::conductor::{Conductor, ConductorError, PlannerConfig, Session, TurnReply};
use quarry_core::db::{DbService, TableRef};
use quarry_core::lm::{LmService, Trace};
use quarry_core::retriever::Retriever;
use quarry_core::value::Relation;

pub use config::{ApiConfig, LmSource};
pub use error::ApiError;

const SAMPLE_ROWS: usize = 5;
const FLAGS_KEY: &str = "planner_flags";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnState {
    #[default]
    Idle,
    Running,
    Failed,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TurnStatus {
    pub state: TurnState,
    pub turns: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_reply: Option<TurnReply>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-session ablation flags, persisted next to the session.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
struct SessionFlags {
    #[serde(default)]
    direct_synthesis: bool,
    #[serde(default)]
    disable_context_extract: bool,
}

struct Slot {
    conductor: Conductor,
    busy: AtomicBool,
    status: Mutex<TurnStatus>,
}

pub struct AppState {
    config: ApiConfig,
    db: Arc<DbService>,
    base: Conductor,
    slots: Mutex<HashMap<String, Arc<Slot>>>,
}

impl AppState {
    pub fn new(config: ApiConfig) -> anyhow::Result<Arc<Self>> {
        config.validate()?;
        let db = DbService::open(&config.corpus_root)?;
        let lm = match config.lm {
            LmSource::Env => LmService::from_env()?,
            LmSource::Scripted => LmService::scripted(Vec::new()),
        };
        let retriever = Arc::new(Retriever::new(db.clone(), lm, config.retriever));
        let base = Conductor::new(db.clone(), retriever, config.planner);
        Ok(Arc::new(Self { config, db, base, slots: Mutex::new(HashMap::new()) }))
    }

    fn conductor_for(&self, flags: SessionFlags, lm: Option<LmService>) -> Conductor {
        let mut c = match lm {
            Some(lm) => self.base.with_lm(lm),
            None => self.base.clone(),
        };
        c.config = PlannerConfig {
            direct_synthesis: flags.direct_synthesis || self.config.planner.direct_synthesis,
            disable_context_extract: flags.disable_context_extract || self.config.planner.disable_context_extract,
            ..self.config.planner
        };
        c
    }

    /// The slot for a session, reviving it from storage after a restart.
    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        if let Some(s) = self.slots.lock().expect("slot map poisoned").get(id) {
            return Ok(s.clone());
        }
        let session = self.base.load_session(id)?;
        let flags = self
            .db
            .load_state(&session.workspace_id, FLAGS_KEY)
            .ok()
            .flatten()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        let slot = Arc::new(Slot {
            conductor: self.conductor_for(flags, None),
            busy: AtomicBool::new(false),
            status: Mutex::new(TurnStatus { turns: session.turns, ..Default::default() }),
        });
        Ok(self.slots.lock().expect("slot map poisoned").entry(id.to_string()).or_insert(slot).clone())
    }

    fn session(&self, id: &str) -> Result<Session, ApiError> {
        self.slot(id)?;
        Ok(self.base.load_session(id)?)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/corpora", get(list_corpora).post(register_corpus))
        .route("/corpora/{id}/index", post(index_corpus))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(session_overview))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/status", get(turn_status))
        .route("/sessions/{id}/transcript", get(transcript))
        .route("/sessions/{id}/model", get(model))
        .route("/sessions/{id}/revisions", get(revisions))
        .route("/sessions/{id}/provenance", get(provenance))
        .route("/sessions/{id}/provenance/script", get(provenance_script))
        .route("/sessions/{id}/document", get(document))
        .route("/sessions/{id}/usage", get(usage))
        .layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new().route("/healthz", get(|| async { "ok" })).merge(api).with_state(state)
}

/// Bind and serve until ctrl-c.
pub async fn serve(config: ApiConfig) -> anyhow::Result<()> {
    let bind = config.bind;
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(%bind, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn require_token(State(st): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.config.token {
        let given = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

// ----------------------------------------------------------------------
// corpora

#[derive(Deserialize)]
struct RegisterCorpus {
    path: PathBuf,
    dataset_id: String,
}

async fn list_corpora(State(st): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(st.db.datasets())
}

async fn register_corpus(State(st): State<Arc<AppState>>, Json(body): Json<RegisterCorpus>) -> Result<(StatusCode, Json<Vec<TableRef>>), ApiError> {
    let tables = blocking(move || Ok(st.db.ingest_dataset(&body.path, &body.dataset_id)?)).await?;
    Ok((StatusCode::CREATED, Json(tables)))
}

#[derive(Serialize)]
struct IndexStatus {
    dataset_id: String,
    tables: usize,
    degraded: bool,
}

async fn index_corpus(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<IndexStatus>, ApiError> {
    blocking(move || {
        let idx = st.base.retriever.build_index(&id)?;
        Ok(Json(IndexStatus { dataset_id: id, tables: idx.summaries.len(), degraded: idx.degraded }))
    })
    .await
}

// ----------------------------------------------------------------------
// sessions

#[derive(Deserialize, Default)]
#[serde(default)]
struct CreateSession {
    datasets: Vec<String>,
    session_id: Option<String>,
    direct_synthesis: bool,
    disable_context_extract: bool,
    /// Scripted replies; accepted only when the service runs scripted.
    trace: Option<Trace>,
}

#[derive(Serialize)]
struct Created {
    session_id: String,
    workspace_id: String,
    datasets: Vec<String>,
}

async fn list_sessions(State(st): State<Arc<AppState>>) -> Result<Json<Vec<String>>, ApiError> {
    blocking(move || Ok(Json(st.base.session_ids()?))).await
}

async fn create_session(State(st): State<Arc<AppState>>, Json(body): Json<CreateSession>) -> Result<(StatusCode, Json<Created>), ApiError> {
    if body.trace.is_some() && st.config.lm != LmSource::Scripted {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "traces are accepted only by a scripted service"));
    }
    blocking(move || {
        let id = body.session_id.clone().unwrap_or_else(|| format!("s_{}", &uuid::Uuid::new_v4().simple().to_string()[..16]));
        if st.slots.lock().expect("slot map poisoned").contains_key(&id) || st.base.load_session(&id).is_ok() {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("session {id} already exists")));
        }
        let mut flags = SessionFlags { direct_synthesis: body.direct_synthesis, disable_context_extract: body.disable_context_extract };
        let mut datasets = body.datasets.clone();
        let lm = match body.trace {
            Some(t) => {
                flags.direct_synthesis |= t.direct_synthesis;
                flags.disable_context_extract |= t.disable_context_extract;
                if datasets.is_empty() {
                    datasets.extend(t.dataset.clone());
                }
                Some(t.provider())
            }
            None if st.config.lm == LmSource::Scripted => Some(LmService::scripted(Vec::new())),
            None => None,
        };
        let conductor = st.conductor_for(flags, lm);
        let session = conductor.create_session(&id, &datasets)?;
        st.db
            .save_state(&session.workspace_id, FLAGS_KEY, &serde_json::to_string(&flags).expect("flags serialize"))?;
        let slot = Arc::new(Slot { conductor, busy: AtomicBool::new(false), status: Mutex::new(TurnStatus::default()) });
        st.slots.lock().expect("slot map poisoned").insert(id.clone(), slot);
        Ok((
            StatusCode::CREATED,
            Json(Created { session_id: session.session_id, workspace_id: session.workspace_id, datasets: session.datasets }),
        ))
    })
    .await
}

#[derive(Serialize)]
struct Overview {
    session_id: String,
    workspace_id: String,
    datasets: Vec<String>,
    turns: usize,
    revision: u64,
    pending_question: Option<String>,
    has_document: bool,
    status: TurnStatus,
}

async fn session_overview(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Overview>, ApiError> {
    blocking(move || {
        let s = st.session(&id)?;
        let status = st.slot(&id)?.status.lock().expect("status poisoned").clone();
        Ok(Json(Overview {
            session_id: s.session_id,
            workspace_id: s.workspace_id,
            datasets: s.datasets,
            turns: s.turns,
            revision: s.model.revision,
            pending_question: s.pending_question,
            has_document: s.document.is_some(),
            status,
        }))
    })
    .await
}

#[derive(Deserialize)]
struct Message {
    text: String,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct MessageQuery {
    r#async: bool,
}

#[derive(Serialize)]
struct Accepted {
    session_id: String,
    status_url: String,
}

async fn post_message(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<MessageQuery>,
    Json(msg): Json<Message>,
) -> Result<Response, ApiError> {
    let slot = {
        let st = st.clone();
        let id = id.clone();
        blocking(move || st.slot(&id)).await?
    };
    if slot.busy.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("session {id} already has a turn in flight")));
    }
    slot.status.lock().expect("status poisoned").state = TurnState::Running;
    let task = {
        let slot = slot.clone();
        let id = id.clone();
        tokio::task::spawn_blocking(move || run_turn(&slot, &id, &msg.text))
    };
    if q.r#async {
        let body = Accepted { status_url: format!("/sessions/{id}/status"), session_id: id };
        return Ok((StatusCode::ACCEPTED, Json(body)).into_response());
    }
    let reply = task.await.map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(reply).into_response())
}

fn run_turn(slot: &Slot, id: &str, text: &str) -> Result<TurnReply, ApiError> {
    let result = slot
        .conductor
        .load_session(id)
        .and_then(|mut s| slot.conductor.handle_message(&mut s, text).map(|r| (r, s.turns)));
    let mut status = slot.status.lock().expect("status poisoned");
    let out = match result {
        Ok((reply, turns)) => {
            *status = TurnStatus { state: TurnState::Idle, turns, last_reply: Some(reply.clone()), error: None };
            Ok(reply)
        }
        Err(e) => {
            tracing::warn!(session = id, error = %e, "turn failed");
            status.state = TurnState::Failed;
            status.error = Some(e.to_string());
            Err(e.into())
        }
    };
    drop(status);
    slot.busy.store(false, Ordering::Release);
    out
}

async fn turn_status(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<TurnStatus>, ApiError> {
    blocking(move || Ok(Json(st.slot(&id)?.status.lock().expect("status poisoned").clone()))).await
}

async fn transcript(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    blocking(move || Ok(Json(st.session(&id)?.transcript).into_response())).await
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RevisionQuery {
    revision: Option<u64>,
}

#[derive(Serialize)]
struct ModelView {
    model: quarry_core::model::TargetModel,
    /// First rows of each materialized view, keyed by view id.
    samples: BTreeMap<String, Relation>,
}

async fn model(State(st): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<RevisionQuery>) -> Result<Json<ModelView>, ApiError> {
    blocking(move || {
        let s = st.session(&id)?;
        let model = match q.revision {
            None => s.model.clone(),
            Some(r) => s
                .revision(r)
                .cloned()
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("revision {r} not found")))?,
        };
        let mut samples = BTreeMap::new();
        for v in model.views.iter().filter(|v| v.is_materialized()) {
            let Some(table) = &v.materialized_ref else { continue };
            match st.db.resolve_table(&s.workspace_id, table).and_then(|t| st.db.sample_rows(&t, SAMPLE_ROWS)) {
                Ok(rel) => {
                    samples.insert(v.view_id.clone(), rel);
                }
                Err(e) => tracing::warn!(view = %v.view_id, error = %e, "no sample rows"),
            }
        }
        Ok(Json(ModelView { model, samples }))
    })
    .await
}

async fn revisions(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    blocking(move || Ok(Json(st.session(&id)?.revisions).into_response())).await
}

async fn provenance(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    blocking(move || Ok(Json(st.session(&id)?.provenance).into_response())).await
}

async fn provenance_script(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    blocking(move || {
        let s = st.session(&id)?;
        let script = st.base.derivation_script(&s)?;
        Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], script).into_response())
    })
    .await
}

async fn document(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    blocking(move || match st.session(&id)?.document {
        Some(d) => Ok(Json(d).into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "no document has been produced yet")),
    })
    .await
}

async fn usage(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    blocking(move || Ok(Json(st.session(&id)?.usage).into_response())).await
}

impl From<ConductorError> for ApiError {
    fn from(e: ConductorError) -> Self {
        error::from_conductor(e)
    }
}
