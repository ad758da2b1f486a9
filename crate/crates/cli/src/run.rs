//! Headless sessions over a local store.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use quarry_core::conductor::{Conductor, ConductorError, PlannerConfig, Session, TurnReply};
use quarry_core::db::DbService;
use quarry_core::lm::{LmService, Trace};
use quarry_core::retriever::{Retriever, RetrieverConfig};

/// A store plus a retriever whose index cache every session shares.
#[derive(Clone)]
pub struct Engine {
    pub db: Arc<DbService>,
    pub retriever: Arc<Retriever>,
}

impl Engine {
    pub fn open(root: &Path, lm: LmService) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root)?;
        let db = DbService::open(root)?;
        let retriever = Arc::new(Retriever::new(db.clone(), lm, RetrieverConfig::default()));
        Ok(Self { db, retriever })
    }

    /// A conductor talking to `lm` (the engine's own model when `None`).
    pub fn conductor(&self, lm: Option<LmService>, planner: PlannerConfig) -> Conductor {
        let c = Conductor::new(self.db.clone(), self.retriever.clone(), planner);
        match lm {
            Some(lm) => c.with_lm(lm),
            None => c,
        }
    }

    /// Conductor for a trace: scripted replies and the trace's ablation flags.
    pub fn traced(&self, trace: &Trace, base: PlannerConfig) -> Conductor {
        let planner = PlannerConfig {
            direct_synthesis: base.direct_synthesis || trace.direct_synthesis,
            disable_context_extract: base.disable_context_extract || trace.disable_context_extract,
            ..base
        };
        self.conductor(Some(trace.provider()), planner)
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub session: Session,
    pub replies: Vec<TurnReply>,
    pub total: Duration,
    /// Time spent inside model calls.
    pub llm: Duration,
}

impl RunOutcome {
    pub fn non_llm(&self) -> Duration {
        self.total.saturating_sub(self.llm)
    }
}

/// Create a session and play `messages` as consecutive user turns.
pub fn run_session(c: &Conductor, session_id: &str, datasets: &[String], messages: &[String]) -> Result<RunOutcome, ConductorError> {
    let started = Instant::now();
    let mut session = c.create_session(session_id, datasets)?;
    let mut replies = Vec::new();
    for m in messages {
        replies.push(c.handle_message(&mut session, m)?);
    }
    let total = started.elapsed();
    let llm = session.usage.wall_time;
    Ok(RunOutcome { session, replies, total, llm })
}

/// A fresh, valid session id with a readable prefix.
pub fn fresh_session_id(prefix: &str) -> String {
    let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    let n = NEXT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    format!("{prefix}_{:x}_{n}", nanos & 0xffff_ffff_ffff)
}

static NEXT: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
