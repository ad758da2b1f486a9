//! Sandboxed script execution.
//!
//! Scripts are Rhai programs. The engine has no module resolver and no I/O
//! functions; the only way out of the sandbox is the three db functions
//! registered here, all scoped to one workspace:
//!
//! ```text
//! execute_query(sql)            -> #{ columns: [..], rows: [[..], ..] }
//! execute_query(sql, limit)     -> same, truncated
//! persist_as_table(sql, name)   -> #{ table_id, row_count }
//! sample_rows(table, n)         -> #{ columns, rows }
//! ```
//!
//! A script's final value is its result: either a `#{columns, rows}` map or
//! the name of a table to read in full.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rhai::module_resolvers::DummyModuleResolver;
use rhai::{Array, Dynamic, Engine, EvalAltResult, Map, Position};
use thiserror::Error;

use crate::db::{DbService, Persisted};
use crate::model::{ColumnSpec, DeclaredType};
use crate::value::{Relation, Value};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptLimits {
    pub wall_time: Duration,
    pub memory_bytes: usize,
}

impl Default for ScriptLimits {
    fn default() -> Self {
        Self {
            wall_time: Duration::from_secs(60),
            memory_bytes: 512 << 20,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScriptError {
    #[error("script does not parse: {0}")]
    Syntax(String),
    #[error("script failed: {0}")]
    Runtime(String),
    #[error("script exceeded its {0:?} wall-clock budget")]
    Timeout(Duration),
    #[error("script exceeded its memory budget of {0} bytes")]
    MemoryExceeded(usize),
    #[error("script result is not a table: {0}")]
    BadResult(String),
}

/// Everything a finished script did.
#[derive(Debug, Default)]
pub struct ScriptRun {
    pub persisted: Vec<Persisted>,
    pub result: Option<Relation>,
}

/// Parse-only check.
pub fn check_syntax(body: &str) -> Result<(), String> {
    sandbox_engine().compile(body).map(|_| ()).map_err(|e| e.to_string())
}

fn sandbox_engine() -> Engine {
    let mut engine = Engine::new();
    engine.set_module_resolver(DummyModuleResolver::new());
    engine.disable_symbol("eval");
    engine.set_max_string_size(64 << 20);
    engine.set_max_array_size(20_000_000);
    engine.set_max_map_size(1_000_000);
    engine.set_max_call_levels(64);
    engine.on_print(|_| {});
    engine.on_debug(|_, _, _| {});
    engine
}

struct Budget {
    used: usize,
    limit: usize,
}

impl Budget {
    fn charge(&mut self, rel: &Relation) -> Result<(), Box<EvalAltResult>> {
        let bytes: usize = rel
            .rows
            .iter()
            .flatten()
            .map(|v| match v {
                Value::Text(s) => 32 + s.len(),
                _ => 16,
            })
            .sum();
        self.used += bytes;
        if self.used > self.limit {
            return Err(Box::new(EvalAltResult::ErrorRuntime(
                format!("memory budget of {} bytes exceeded", self.limit).into(),
                Position::NONE,
            )));
        }
        Ok(())
    }
}

fn rhai_err(e: impl std::fmt::Display) -> Box<EvalAltResult> {
    e.to_string().into()
}

/// Run `body` in the sandbox against `workspace_id`.
pub fn run_script(
    db: &Arc<DbService>,
    workspace_id: &str,
    body: &str,
    limits: ScriptLimits,
) -> Result<ScriptRun, ScriptError> {
    let mut engine = sandbox_engine();
    let ast = engine.compile(body).map_err(|e| ScriptError::Syntax(e.to_string()))?;

    let started = Instant::now();
    let wall = limits.wall_time;
    engine.on_progress(move |_| (started.elapsed() > wall).then(|| Dynamic::from("timeout")));

    let persisted: Rc<RefCell<Vec<Persisted>>> = Rc::default();
    let budget = Rc::new(RefCell::new(Budget {
        used: 0,
        limit: limits.memory_bytes,
    }));

    {
        let (db, ws, budget) = (db.clone(), workspace_id.to_string(), budget.clone());
        engine.register_fn("execute_query", move |sql: &str| -> Result<Map, Box<EvalAltResult>> {
            let r = db.execute_query(&ws, sql, None).map_err(rhai_err)?;
            budget.borrow_mut().charge(&r.relation)?;
            Ok(relation_to_map(&r.relation))
        });
    }
    {
        let (db, ws, budget) = (db.clone(), workspace_id.to_string(), budget.clone());
        engine.register_fn(
            "execute_query",
            move |sql: &str, limit: i64| -> Result<Map, Box<EvalAltResult>> {
                let r = db.execute_query(&ws, sql, Some(limit.max(0) as usize)).map_err(rhai_err)?;
                budget.borrow_mut().charge(&r.relation)?;
                Ok(relation_to_map(&r.relation))
            },
        );
    }
    {
        let (db, ws, persisted) = (db.clone(), workspace_id.to_string(), persisted.clone());
        engine.register_fn(
            "persist_as_table",
            move |sql: &str, name: &str| -> Result<Map, Box<EvalAltResult>> {
                let p = db.persist_as_table(&ws, sql, name).map_err(rhai_err)?;
                let mut m = Map::new();
                m.insert("table_id".into(), p.table.table_id.clone().into());
                m.insert("row_count".into(), (p.table.row_count as i64).into());
                persisted.borrow_mut().push(p);
                Ok(m)
            },
        );
    }
    {
        let (db, ws, budget) = (db.clone(), workspace_id.to_string(), budget.clone());
        engine.register_fn(
            "sample_rows",
            move |table: &str, n: i64| -> Result<Map, Box<EvalAltResult>> {
                let t = db.resolve_table(&ws, table).map_err(rhai_err)?;
                let rel = db.sample_rows(&t, n.max(0) as usize).map_err(rhai_err)?;
                budget.borrow_mut().charge(&rel)?;
                Ok(relation_to_map(&rel))
            },
        );
    }

    let outcome = engine.eval_ast::<Dynamic>(&ast);
    let persisted = std::mem::take(&mut *persisted.borrow_mut());
    let value = match outcome {
        Ok(v) => v,
        Err(e) => {
            return Err(match *e {
                EvalAltResult::ErrorTerminated(..) => ScriptError::Timeout(wall),
                ref other if other.to_string().contains("memory budget") => {
                    ScriptError::MemoryExceeded(limits.memory_bytes)
                }
                other => ScriptError::Runtime(other.to_string()),
            })
        }
    };

    let result = if value.is_unit() {
        None
    } else if value.is_string() {
        let name = value.into_string().expect("checked string");
        let rel = db
            .execute_query(workspace_id, &format!("SELECT * FROM {}", crate::value::quote_ident(&name)), None)
            .map_err(|e| ScriptError::BadResult(e.to_string()))?;
        Some(rel.relation)
    } else if value.is_map() {
        let m = value.cast::<Map>();
        // a trailing persist_as_table(..) call is not a result
        if m.contains_key("table_id") && !m.contains_key("columns") {
            None
        } else {
            Some(map_to_relation(m)?)
        }
    } else {
        return Err(ScriptError::BadResult(format!("got a value of type {}", value.type_name())));
    };
    Ok(ScriptRun { persisted, result })
}

fn value_to_dynamic(v: &Value) -> Dynamic {
    match v {
        Value::Null => Dynamic::UNIT,
        Value::Integer(i) => (*i).into(),
        Value::Real(r) => (*r).into(),
        Value::Text(s) => s.clone().into(),
    }
}

fn dynamic_to_value(d: &Dynamic) -> Result<Value, ScriptError> {
    if d.is_unit() {
        Ok(Value::Null)
    } else if let Some(i) = d.clone().try_cast::<i64>() {
        Ok(Value::Integer(i))
    } else if let Some(f) = d.clone().try_cast::<f64>() {
        Ok(Value::Real(f))
    } else if let Some(b) = d.clone().try_cast::<bool>() {
        Ok(Value::Integer(b as i64))
    } else if d.is_string() || d.is_char() {
        Ok(Value::Text(d.to_string()))
    } else {
        Err(ScriptError::BadResult(format!("cell of type {}", d.type_name())))
    }
}

fn relation_to_map(rel: &Relation) -> Map {
    let columns: Array = rel.schema.iter().map(|c| Dynamic::from(c.name.clone())).collect();
    let rows: Array = rel
        .rows
        .iter()
        .map(|r| Dynamic::from_array(r.iter().map(value_to_dynamic).collect()))
        .collect();
    let mut m = Map::new();
    m.insert("columns".into(), Dynamic::from_array(columns));
    m.insert("rows".into(), Dynamic::from_array(rows));
    m
}

fn map_to_relation(m: Map) -> Result<Relation, ScriptError> {
    let bad = |what: &str| ScriptError::BadResult(what.to_string());
    let columns = m
        .get("columns")
        .and_then(|c| c.clone().try_cast::<Array>())
        .ok_or_else(|| bad("result map needs a `columns` array"))?;
    let rows = m
        .get("rows")
        .and_then(|r| r.clone().try_cast::<Array>())
        .ok_or_else(|| bad("result map needs a `rows` array"))?;
    let names: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
    let mut out_rows = Vec::with_capacity(rows.len());
    for r in rows {
        let cells = r.try_cast::<Array>().ok_or_else(|| bad("each row must be an array"))?;
        if cells.len() != names.len() {
            return Err(bad("row arity differs from the column list"));
        }
        out_rows.push(cells.iter().map(dynamic_to_value).collect::<Result<Vec<_>, _>>()?);
    }
    let schema = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut ty = None;
            for row in &out_rows {
                ty = match (&row[i], ty) {
                    (Value::Null, t) => t,
                    (Value::Integer(_), None) => Some(DeclaredType::Integer),
                    (Value::Real(_), None | Some(DeclaredType::Integer)) => Some(DeclaredType::Real),
                    (Value::Text(_), _) => Some(DeclaredType::Text),
                    (_, t) => t,
                };
            }
            ColumnSpec::new(n.clone(), ty.unwrap_or(DeclaredType::Text), format!("column {n}"))
        })
        .collect();
    Ok(Relation::new(schema, out_rows))
}
