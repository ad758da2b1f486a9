//! Running `S` and replaying derivation scripts.

use std::sync::Arc;

use thiserror::Error;

use crate::db::{DbError, DbService};
use crate::model::{parse_derivation_script, sql_is_ordered, DerivationError, Document, StepBody, TransformKind, TransformationS};
use crate::script::{run_script, ScriptError, ScriptLimits};
use crate::value::Relation;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Derivation(#[from] DerivationError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("step {0} is not a CREATE TABLE ... AS statement")]
    NotReplayable(String),
    #[error("the final step produced no result relation")]
    NoResult,
}

fn run_final(db: &Arc<DbService>, ws: &str, body: &StepBody, limits: ScriptLimits) -> Result<(Relation, bool), ReplayError> {
    match body {
        StepBody::Sql(sql) => Ok((db.execute_query(ws, sql, None)?.relation, sql_is_ordered(sql))),
        StepBody::Script(script) => {
            let run = run_script(db, ws, script, limits)?;
            // script results keep the row order the program built
            Ok((run.result.ok_or(ReplayError::NoResult)?, true))
        }
    }
}

/// Execute `S` in a workspace. Returns the relation and whether its row
/// order is meaningful.
pub fn run_transformation(db: &Arc<DbService>, ws: &str, s: &TransformationS, limits: ScriptLimits) -> Result<(Relation, bool), ReplayError> {
    let body = match s.kind {
        TransformKind::Sql => StepBody::Sql(s.body.clone()),
        TransformKind::Script => StepBody::Script(s.body.clone()),
    };
    run_final(db, ws, &body, limits)
}

/// Replay a derivation script into `ws` (normally a fresh workspace with
/// the same sources attached) and build the resulting Document.
pub fn replay_derivation(
    db: &Arc<DbService>,
    ws: &str,
    script: &str,
    bare_kind: TransformKind,
    produced_by: u64,
    limits: ScriptLimits,
) -> Result<Document, ReplayError> {
    let steps = parse_derivation_script(script, bare_kind)?;
    let mut result = None;
    for step in &steps {
        if step.is_final {
            result = Some(run_final(db, ws, &step.body, limits)?);
            continue;
        }
        match &step.body {
            StepBody::Sql(stmt) => {
                if !stmt.trim_start().to_ascii_uppercase().starts_with("CREATE TABLE") {
                    return Err(ReplayError::NotReplayable(step.header.clone()));
                }
                db.replay_statement(ws, stmt)?;
            }
            StepBody::Script(body) => {
                run_script(db, ws, body, limits)?;
            }
        }
    }
    let (rel, ordered) = result.ok_or(ReplayError::NoResult)?;
    Ok(Document::from_relation(rel, produced_by, ordered))
}
