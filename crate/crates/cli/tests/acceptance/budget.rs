//! Loop bounds under adversarial scripts, and workspace isolation under
//! concurrent load.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde_json::json;

use quarry_core::conductor::{PlannerConfig, ReplyKind, Session, TranscriptEntry, DEFAULT_C};
use quarry_core::lm::{ScriptedReply, Trace};
use quarry_core::materializer::DEFAULT_M;
use quarry_core::value::Value;

use crate::common::{play, write_csv, Store};
use crate::{Ctx, Outcome};

const ISOLATION_SECS: u64 = 60;
const SESSIONS: usize = 8;

fn lake(store: &Store) -> anyhow::Result<()> {
    let data = store.data_dir("lake")?;
    write_csv(&data.join("cities.csv"), &["city", "country"], &[vec!["Oslo".into(), "Norway".into()], vec!["Lund".into(), "Sweden".into()]])?;
    write_csv(&data.join("rivers.csv"), &["river", "length_km"], &[vec!["Glomma".into(), "621".into()]])?;
    store.db().ingest_dataset(&data, "lake")?;
    store.engine.retriever.build_index("lake")?;
    Ok(())
}

fn plan(actions: serde_json::Value) -> ScriptedReply {
    ScriptedReply::json(json!({"analysis": "keep going", "actions": actions}))
}

fn trace(replies: Vec<ScriptedReply>) -> Trace {
    Trace { dataset: Some("lake".into()), messages: vec!["Tell me everything about the lake.".into()], replies, ..Default::default() }
}

/// (highest conductor iteration, highest materializer iteration) in the transcript.
fn max_iterations(s: &Session) -> (usize, usize) {
    let (mut c, mut m) = (0, 0);
    for e in &s.transcript {
        if let TranscriptEntry::Action { record, .. } = e {
            if record.kind.starts_with("materializer/") {
                m = m.max(record.iteration);
            } else {
                c = c.max(record.iteration);
            }
        }
    }
    (c, m)
}

pub fn check_budgets(_: &mut Ctx) -> anyhow::Result<Outcome> {
    let store = Store::new()?;
    lake(&store)?;
    let c = DEFAULT_C;
    let m = DEFAULT_M;
    let view = json!({"view_id": "everything", "columns": [{"name": "city", "declared_type": "text", "description": "city"}]});

    // the planner never communicates
    let mut endless: Vec<ScriptedReply> = (0..c).map(|_| plan(json!([{"kind": "enumerate", "pattern": ".*"}]))).collect();
    endless.push(ScriptedReply::text("Out of iterations; here is what I found."));
    // every action the planner picks fails
    let mut failing: Vec<ScriptedReply> = (0..c).map(|_| plan(json!([{"kind": "executor"}, {"kind": "enumerate", "pattern": ".*"}]))).collect();
    failing.push(ScriptedReply::text("Nothing could be computed."));
    // the materializer never finishes its view; the planner reply after it
    // only matches once the budget has been reported exhausted
    let mut stuck = vec![plan(json!([
        {"kind": "model_update", "add_views": [view], "transformation": {"kind": "sql", "body": "SELECT * FROM everything", "declared_inputs": ["everything"]}},
        {"kind": "materialize"}
    ]))];
    stuck.extend((0..m).map(|_| plan(json!([{"kind": "query_exec", "sql": "SELECT count(*) FROM cities"}]))));
    stuck.push(
        plan(json!([{"kind": "user_communicate", "communication": "answer", "text": "The view could not be built."}]))
            .expecting("iteration budget exhausted"),
    );

    let mut lines = Vec::new();
    let mut pass = true;
    for (name, replies, want_kind) in
        [("endless planner", endless, ReplyKind::Forced), ("failing actions", failing, ReplyKind::Forced), ("stuck materializer", stuck, ReplyKind::Answer)]
    {
        let p = play(&store, &trace(replies), PlannerConfig::default())?;
        let s = &p.outcome.session;
        let reply = p.outcome.replies.last().expect("one turn");
        let (ci, mi) = max_iterations(s);
        let ok = reply.kind == want_kind
            && ci <= c
            && mi <= m
            && s.iterations_in_turn(1) <= c
            && match name {
                "stuck materializer" => mi == m,
                _ => ci == c,
            };
        pass &= ok;
        lines.push(format!("{name}: {:?} after {ci} planner / {mi} materializer iterations", reply.kind));
    }
    Ok(Outcome::new(pass, format!("c={c}, m={m}; {}", lines.join("; "))))
}

pub fn check_isolation(_: &mut Ctx) -> anyhow::Result<Outcome> {
    let secs = std::env::var("QUARRY_ISOLATION_SECS").ok().and_then(|s| s.parse().ok()).unwrap_or(ISOLATION_SECS);
    let store = Store::new()?;
    lake(&store)?;
    let db = store.db().clone();
    let violations = AtomicUsize::new(0);
    let ops = AtomicUsize::new(0);
    let errors = AtomicUsize::new(0);
    let first_violation = std::sync::Mutex::new(None::<String>);
    let deadline = Instant::now() + Duration::from_secs(secs);
    let scope = vec!["lake".to_string()];

    std::thread::scope(|sc| {
        for i in 0..SESSIONS {
            let (db, violations, ops, errors, first_violation, scope) = (&db, &violations, &ops, &errors, &first_violation, &scope);
            sc.spawn(move || {
                let ws = format!("iso_{i}");
                let violate = |what: String| {
                    violations.fetch_add(1, Ordering::Relaxed);
                    first_violation.lock().expect("poisoned").get_or_insert(what);
                };
                let mut n = 0u64;
                while Instant::now() < deadline {
                    // recycle the workspace now and then to exercise drop/open
                    if n % 200 == 0 {
                        let _ = db.drop_workspace(&ws);
                        if db.open_workspace(&ws, scope).is_err()
                            || db.persist_as_table(&ws, &format!("SELECT {i} AS owner"), &format!("w{i}_anchor")).is_err()
                        {
                            errors.fetch_add(1, Ordering::Relaxed);
                            continue;
                        }
                    }
                    let t = format!("w{i}_t{n}");
                    match db.persist_as_table(&ws, &format!("SELECT {i} AS owner, {n} AS seq, count(*) AS c FROM cities"), &t) {
                        Ok(_) => match db.execute_query(&ws, &format!("SELECT owner, seq, c FROM {t}"), None) {
                            Ok(r) if r.relation.rows == vec![vec![Value::Integer(i as i64), Value::Integer(n as i64), Value::Integer(2)]] => {}
                            Ok(r) => violate(format!("{ws} read back {:?} from {t}", r.relation.rows)),
                            Err(e) => violate(format!("{ws} cannot read its own {t}: {e}")),
                        },
                        Err(_) => {
                            errors.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    // another session's tables must stay invisible
                    let j = (i + 1 + n as usize % (SESSIONS - 1)) % SESSIONS;
                    if let Ok(r) = db.execute_query(&ws, &format!("SELECT owner FROM w{j}_anchor"), None) {
                        violate(format!("{ws} read w{j}_anchor: {:?}", r.relation.rows));
                    }
                    if n % 50 == 0 {
                        if let Ok(w) = db.workspace(&ws) {
                            if let Some(bad) = w.intermediate_tables.iter().find(|t| !t.starts_with(&format!("w{i}_"))) {
                                violate(format!("{ws} lists foreign table {bad}"));
                            }
                        }
                    }
                    ops.fetch_add(1, Ordering::Relaxed);
                    n += 1;
                }
            });
        }
    });
    let v = violations.load(Ordering::Relaxed);
    let mut detail = format!(
        "{SESSIONS} concurrent sessions for {secs}s (criterion {ISOLATION_SECS}s): {} persist/query rounds, {} transient errors, {v} isolation violations",
        ops.load(Ordering::Relaxed),
        errors.load(Ordering::Relaxed)
    );
    if let Some(f) = first_violation.into_inner().expect("poisoned") {
        detail.push_str(&format!("; first: {f}"));
    }
    Ok(Outcome::new(v == 0 && secs >= ISOLATION_SECS && ops.load(Ordering::Relaxed) > 0, detail))
}
