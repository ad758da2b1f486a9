//! Cell values and in-memory relations.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::model::{ColumnSpec, DeclaredType};

/// A single cell as stored by the engine.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            Value::Text(t) => t.trim().parse().ok(),
            Value::Null => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Integer(i) => Some(*i),
            Value::Real(r) if r.fract() == 0.0 => Some(*r as i64),
            Value::Text(t) => t.trim().parse().ok(),
            _ => None,
        }
    }

    /// Text rendering used for prompts, summaries and semantic matching.
    pub fn render(&self) -> String {
        match self {
            Value::Null => String::new(),
            Value::Integer(i) => i.to_string(),
            Value::Real(r) => r.to_string(),
            Value::Text(t) => t.clone(),
        }
    }

    /// SQL literal for this value, exact for reals.
    pub fn sql_literal(&self) -> String {
        match self {
            Value::Null => "NULL".into(),
            Value::Integer(i) => i.to_string(),
            Value::Real(r) if r.is_finite() => {
                let s = format!("{r:?}");
                if s.contains('.') || s.contains('e') {
                    s
                } else {
                    format!("{s}.0")
                }
            }
            Value::Real(_) => "NULL".into(),
            Value::Text(t) => quote_literal(t),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Integer(_) | Value::Real(_) => 1,
            Value::Text(_) => 2,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("NULL"),
            other => f.write_str(&other.render()),
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Integers and reals compare numerically; an integer equals a real only when
// the real is exactly integral.
impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Integer(a), Value::Integer(b)) => a.cmp(b),
            (Value::Real(a), Value::Real(b)) => a.total_cmp(b),
            (Value::Integer(a), Value::Real(b)) => (*a as f64).total_cmp(b),
            (Value::Real(a), Value::Integer(b)) => a.total_cmp(&(*b as f64)),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (a, b) => a.rank().cmp(&b.rank()),
        }
    }
}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match self {
            Value::Null => 0u8.hash(state),
            Value::Integer(i) => {
                1u8.hash(state);
                (*i as f64).to_bits().hash(state);
            }
            Value::Real(r) => {
                1u8.hash(state);
                r.to_bits().hash(state);
            }
            Value::Text(t) => {
                2u8.hash(state);
                t.hash(state);
            }
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Integer(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Real(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

pub type Row = Vec<Value>;

/// Rows plus schema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub schema: Vec<ColumnSpec>,
    pub rows: Vec<Row>,
}

impl Relation {
    pub fn new(schema: Vec<ColumnSpec>, rows: Vec<Row>) -> Self {
        Self { schema, rows }
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.schema.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c.name == name)
    }

    pub fn arity(&self) -> usize {
        self.schema.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row multiset as a sorted list; two relations with equal multisets
    /// produce equal outputs.
    pub fn row_multiset(&self) -> BTreeMap<Row, usize> {
        let mut out = BTreeMap::new();
        for row in &self.rows {
            *out.entry(row.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn same_rows_unordered(&self, other: &Relation) -> bool {
        self.arity() == other.arity() && self.row_multiset() == other.row_multiset()
    }

    /// True when every non-null cell agrees with its column's declared type
    /// and every row has the schema's arity.
    pub fn conforms(&self) -> bool {
        self.rows.iter().all(|row| {
            row.len() == self.schema.len()
                && row
                    .iter()
                    .zip(&self.schema)
                    .all(|(v, c)| value_fits(v, c.declared_type))
        })
    }

    /// Compact pipe-delimited rendering, at most `limit` rows.
    pub fn render_table(&self, limit: usize) -> String {
        let mut out = self.column_names().join(" | ");
        for row in self.rows.iter().take(limit) {
            out.push('\n');
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(" | "));
        }
        if self.rows.len() > limit {
            out.push_str(&format!("\n... ({} more rows)", self.rows.len() - limit));
        }
        out
    }
}

pub fn value_fits(v: &Value, ty: DeclaredType) -> bool {
    match (v, ty) {
        (Value::Null, _) => true,
        (Value::Integer(_), DeclaredType::Integer | DeclaredType::Boolean) => true,
        (Value::Integer(_) | Value::Real(_), DeclaredType::Real) => true,
        (Value::Text(_), DeclaredType::Text | DeclaredType::Date | DeclaredType::Timestamp) => {
            true
        }
        // text columns may legitimately hold numbers produced by expressions
        (_, DeclaredType::Text) => true,
        _ => false,
    }
}

/// Double-quote an SQL identifier.
pub fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Single-quote an SQL string literal.
pub fn quote_literal(text: &str) -> String {
    format!("'{}'", text.replace('\'', "''"))
}
