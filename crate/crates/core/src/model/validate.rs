use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{TargetModel, TransformKind};

/// One broken invariant of a [`TargetModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    DuplicateViewId { view_id: String },
    EmptyViewId,
    DuplicateColumn { view_id: String, column: String },
    EmptyColumnDescription { view_id: String, column: String },
    MissingInput { view_id: String },
    UnparseableTransformation { message: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DuplicateViewId { view_id } => write!(f, "duplicate view id {view_id}"),
            Violation::EmptyViewId => write!(f, "view with empty id"),
            Violation::DuplicateColumn { view_id, column } => {
                write!(f, "view {view_id} declares column {column} twice")
            }
            Violation::EmptyColumnDescription { view_id, column } => {
                write!(f, "column {view_id}.{column} has no description")
            }
            Violation::MissingInput { view_id } => {
                write!(f, "S declares input {view_id}, which is not a view in T")
            }
            Violation::UnparseableTransformation { message } => {
                write!(f, "S does not parse: {message}")
            }
        }
    }
}

/// Every invariant violation in `m`; empty means well-formed.
pub fn validate_model(m: &TargetModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for v in &m.views {
        if v.view_id.trim().is_empty() {
            out.push(Violation::EmptyViewId);
        } else if !seen.insert(v.view_id.as_str()) {
            out.push(Violation::DuplicateViewId {
                view_id: v.view_id.clone(),
            });
        }
        let mut cols = HashSet::new();
        for c in &v.columns {
            if !cols.insert(c.name.to_ascii_lowercase()) {
                out.push(Violation::DuplicateColumn {
                    view_id: v.view_id.clone(),
                    column: c.name.clone(),
                });
            }
            if c.description.trim().is_empty() {
                out.push(Violation::EmptyColumnDescription {
                    view_id: v.view_id.clone(),
                    column: c.name.clone(),
                });
            }
        }
    }
    if let Some(s) = &m.transformation {
        for input in &s.declared_inputs {
            if m.view(input).is_none() {
                out.push(Violation::MissingInput {
                    view_id: input.clone(),
                });
            }
        }
        let parsed = match s.kind {
            TransformKind::Sql => check_sql_syntax(&s.body),
            TransformKind::Script => crate::script::check_syntax(&s.body),
        };
        if let Err(message) = parsed {
            out.push(Violation::UnparseableTransformation { message });
        }
    }
    out
}

/// Syntax-only check of one SQL statement.
///
/// The statement is compiled against an empty in-memory database: unknown
/// tables and columns are fine here, grammar errors are not.
pub fn check_sql_syntax(sql: &str) -> Result<(), String> {
    let body = single_statement(sql)?;
    let conn = rusqlite::Connection::open_in_memory().map_err(|e| e.to_string())?;
    let prepared = conn.prepare(body).map(|_| ());
    match prepared {
        Ok(()) => Ok(()),
        Err(rusqlite::Error::MultipleStatement) => Err("more than one statement".into()),
        Err(e) => {
            let msg = e.to_string();
            let grammar = ["syntax error", "incomplete input", "unrecognized token"];
            if grammar.iter().any(|g| msg.contains(g)) {
                Err(msg)
            } else {
                Ok(())
            }
        }
    }
}

/// The one statement in `sql`, without its terminating semicolon. Quotes,
/// bracketed identifiers and comments are skipped when looking for `;`.
pub fn single_statement(sql: &str) -> Result<&str, String> {
    let b = sql.as_bytes();
    let mut i = 0;
    let mut end = None;
    while i < b.len() {
        match b[i] {
            q @ (b'\'' | b'"' | b'`') => {
                i += 1;
                while i < b.len() {
                    if b[i] == q {
                        if b.get(i + 1) == Some(&q) {
                            i += 1;
                        } else {
                            break;
                        }
                    }
                    i += 1;
                }
            }
            b'[' => {
                while i < b.len() && b[i] != b']' {
                    i += 1;
                }
            }
            b'-' if b.get(i + 1) == Some(&b'-') => {
                while i < b.len() && b[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if b.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i + 1 < b.len() && !(b[i] == b'*' && b[i + 1] == b'/') {
                    i += 1;
                }
                i += 1;
            }
            b';' if end.is_none() => end = Some(i),
            c if end.is_some() && !c.is_ascii_whitespace() && c != b';' => {
                return Err("more than one statement".into());
            }
            _ => {}
        }
        i += 1;
    }
    let body = sql[..end.unwrap_or(sql.len())].trim();
    if body.is_empty() {
        return Err("empty statement".into());
    }
    Ok(body)
}
