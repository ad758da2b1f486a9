use std::path::Path;
use std::sync::Arc;

use quarry_cli::run::{fresh_session_id, run_session, Engine, RunOutcome};
use quarry_core::conductor::{Conductor, PlannerConfig};
use quarry_core::lm::{LmService, Trace};
use quarry_core::value::Value;

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A store plus the end-to-end sessions run against it, kept for the replay
/// check.
pub struct Store {
    pub dir: tempfile::TempDir,
    pub engine: Engine,
}

impl Store {
    pub fn new() -> anyhow::Result<Self> {
        let dir = tempfile::tempdir()?;
        let engine = Engine::open(&dir.path().join("store"), LmService::scripted(Vec::new()))?;
        Ok(Self { dir, engine })
    }

    pub fn data_dir(&self, name: &str) -> anyhow::Result<std::path::PathBuf> {
        let d = self.dir.path().join(name);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    pub fn db(&self) -> &Arc<quarry_core::db::DbService> {
        &self.engine.db
    }
}

/// One scripted end-to-end run.
pub struct Played {
    pub conductor: Conductor,
    pub outcome: RunOutcome,
}

pub fn play(store: &Store, trace: &Trace, planner: PlannerConfig) -> anyhow::Result<Played> {
    let conductor = store.engine.traced(trace, planner);
    let id = fresh_session_id("acc");
    let dataset = trace.dataset.clone().expect("trace names its dataset");
    let outcome = run_session(&conductor, &id, &[dataset], &trace.messages)?;
    Ok(Played { conductor, outcome })
}

pub fn scalar(p: &Played) -> Option<Value> {
    p.outcome.session.document.as_ref()?.rows.first()?.first().cloned()
}

/// Exact cell identity: type and bits, unlike `Value`'s numeric equality.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cell {
    Null,
    Int(i64),
    Real(u64),
    Text(String),
}

impl From<&Value> for Cell {
    fn from(v: &Value) -> Self {
        match v {
            Value::Null => Cell::Null,
            Value::Integer(i) => Cell::Int(*i),
            Value::Real(r) => Cell::Real(r.to_bits()),
            Value::Text(t) => Cell::Text(t.clone()),
        }
    }
}

pub fn multiset<'a>(rows: impl IntoIterator<Item = &'a Vec<Value>>) -> std::collections::BTreeMap<Vec<Cell>, usize> {
    let mut m = std::collections::BTreeMap::new();
    for r in rows {
        *m.entry(r.iter().map(Cell::from).collect()).or_insert(0) += 1;
    }
    m
}
