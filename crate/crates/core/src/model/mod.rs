//! The reified target model `(T, S)`, its result documents, and the
//! provenance graph that records how the views in `T` were derived.

mod provenance;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::value::{Relation, Row};

pub use provenance::{
    derivation_script, parse_derivation_script, DerivationError, DerivationStep, Edge, NodeKind,
    ProvenanceGraph, ProvenanceNode, StepBody, TransformationRecord,
};
pub use validate::{check_sql_syntax, single_statement, validate_model, Violation};

/// The user's current articulation of what they need, plus every refinement
/// message received so far in the session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InformationNeed {
    pub text: String,
    #[serde(default)]
    pub history: Vec<String>,
}

impl InformationNeed {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            history: vec![text.clone()],
            text,
        }
    }

    /// Record a refinement. The latest message becomes the active need; blank
    /// messages are kept in the history but never replace the active text.
    pub fn refine(&mut self, message: impl Into<String>) {
        let message = message.into();
        if !message.trim().is_empty() {
            self.text = message.clone();
        }
        self.history.push(message);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeclaredType {
    Integer,
    Real,
    Text,
    Boolean,
    Date,
    Timestamp,
}

impl DeclaredType {
    pub fn sql_name(self) -> &'static str {
        match self {
            DeclaredType::Integer => "INTEGER",
            DeclaredType::Real => "REAL",
            DeclaredType::Text => "TEXT",
            DeclaredType::Boolean => "BOOLEAN",
            DeclaredType::Date => "DATE",
            DeclaredType::Timestamp => "TIMESTAMP",
        }
    }

    /// Map an engine column declaration onto the six-type vocabulary.
    pub fn from_sql_decl(decl: &str) -> Option<Self> {
        let d = decl.to_ascii_uppercase();
        Some(match d.as_str() {
            "" => return None,
            "BOOLEAN" | "BOOL" => DeclaredType::Boolean,
            "DATE" => DeclaredType::Date,
            "TIMESTAMP" | "DATETIME" => DeclaredType::Timestamp,
            _ if d.contains("INT") => DeclaredType::Integer,
            _ if d.contains("CHAR") || d.contains("CLOB") || d.contains("TEXT") => {
                DeclaredType::Text
            }
            _ if d.contains("REAL") || d.contains("FLOA") || d.contains("DOUB") => {
                DeclaredType::Real
            }
            "NUM" | "NUMERIC" => DeclaredType::Real,
            _ => return None,
        })
    }
}

impl fmt::Display for DeclaredType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DeclaredType::Integer => "integer",
            DeclaredType::Real => "real",
            DeclaredType::Text => "text",
            DeclaredType::Boolean => "boolean",
            DeclaredType::Date => "date",
            DeclaredType::Timestamp => "timestamp",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub declared_type: DeclaredType,
    #[serde(default)]
    pub description: String,
}

impl ColumnSpec {
    pub fn new(
        name: impl Into<String>,
        declared_type: DeclaredType,
        description: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            declared_type,
            description: description.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ViewStatus {
    #[default]
    Declared,
    Materialized,
}

/// Schema-level description of one target view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub view_id: String,
    pub columns: Vec<ColumnSpec>,
    #[serde(default)]
    pub status: ViewStatus,
    #[serde(default)]
    pub materialized_ref: Option<String>,
}

impl ViewSpec {
    pub fn declared(view_id: impl Into<String>, columns: Vec<ColumnSpec>) -> Self {
        Self {
            view_id: view_id.into(),
            columns,
            status: ViewStatus::Declared,
            materialized_ref: None,
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.status == ViewStatus::Materialized
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Columns of this view missing from `available`.
    pub fn missing_columns<'a>(&'a self, available: &[String]) -> Vec<&'a str> {
        self.column_names()
            .filter(|c| !available.iter().any(|a| a.eq_ignore_ascii_case(c)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Sql,
    Script,
}

/// The executable transformation `S` over the materialized views.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformationS {
    pub kind: TransformKind,
    pub body: String,
    #[serde(default)]
    pub declared_inputs: Vec<String>,
}

impl TransformationS {
    pub fn sql(body: impl Into<String>, inputs: &[&str]) -> Self {
        Self {
            kind: TransformKind::Sql,
            body: body.into(),
            declared_inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn script(body: impl Into<String>, inputs: &[&str]) -> Self {
        Self {
            kind: TransformKind::Script,
            body: body.into(),
            declared_inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// The pair `(T, S)` at one revision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TargetModel {
    pub views: Vec<ViewSpec>,
    #[serde(default)]
    pub transformation: Option<TransformationS>,
    pub revision: u64,
}

impl TargetModel {
    pub fn view(&self, view_id: &str) -> Option<&ViewSpec> {
        self.views.iter().find(|v| v.view_id == view_id)
    }

    pub fn view_mut(&mut self, view_id: &str) -> Option<&mut ViewSpec> {
        self.views.iter_mut().find(|v| v.view_id == view_id)
    }

    pub fn declared_views(&self) -> impl Iterator<Item = &ViewSpec> {
        self.views.iter().filter(|v| !v.is_materialized())
    }

    pub fn all_materialized(&self) -> bool {
        self.views.iter().all(ViewSpec::is_materialized)
    }

    /// The next revision: a copy with `revision + 1`. Published revisions are
    /// never edited; every mutation goes through this.
    pub fn next_revision(&self) -> TargetModel {
        let mut next = self.clone();
        next.revision += 1;
        next
    }

    /// Short human-readable rendering used in prompts and CLI output.
    pub fn describe(&self) -> String {
        let mut out = format!("revision {}\n", self.revision);
        if self.views.is_empty() {
            out.push_str("T: (no views)\n");
        }
        for v in &self.views {
            let status = match v.status {
                ViewStatus::Declared => "declared".to_string(),
                ViewStatus::Materialized => format!(
                    "materialized as {}",
                    v.materialized_ref.as_deref().unwrap_or("?")
                ),
            };
            out.push_str(&format!("T.{} [{}]\n", v.view_id, status));
            for c in &v.columns {
                out.push_str(&format!(
                    "  - {}: {} -- {}\n",
                    c.name, c.declared_type, c.description
                ));
            }
        }
        match &self.transformation {
            Some(s) => out.push_str(&format!(
                "S ({}; inputs: {}):\n{}\n",
                match s.kind {
                    TransformKind::Sql => "sql",
                    TransformKind::Script => "script",
                },
                s.declared_inputs.join(", "),
                s.body
            )),
            None => out.push_str("S: (not defined)\n"),
        }
        out
    }
}

/// Differences between two revisions, as shown to the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ModelDiff {
    pub from_revision: u64,
    pub to_revision: u64,
    pub added_views: Vec<String>,
    pub removed_views: Vec<String>,
    pub changed_views: Vec<String>,
    pub transformation_changed: bool,
}

impl ModelDiff {
    pub fn between(old: &TargetModel, new: &TargetModel) -> Self {
        let mut diff = ModelDiff {
            from_revision: old.revision,
            to_revision: new.revision,
            ..Default::default()
        };
        for v in &new.views {
            match old.view(&v.view_id) {
                None => diff.added_views.push(v.view_id.clone()),
                Some(o) if o != v => diff.changed_views.push(v.view_id.clone()),
                Some(_) => {}
            }
        }
        for v in &old.views {
            if new.view(&v.view_id).is_none() {
                diff.removed_views.push(v.view_id.clone());
            }
        }
        diff.transformation_changed = old.transformation != new.transformation;
        diff
    }

    pub fn is_empty(&self) -> bool {
        self.added_views.is_empty()
            && self.removed_views.is_empty()
            && self.changed_views.is_empty()
            && !self.transformation_changed
    }
}

/// The answer relation produced by executing `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub rows: Vec<Row>,
    pub schema: Vec<ColumnSpec>,
    pub produced_by: u64,
    #[serde(default)]
    pub answer_text: Option<String>,
    /// Whether `S` imposes a row order; otherwise rows compare as a multiset.
    #[serde(default)]
    pub ordered: bool,
}

impl Document {
    pub fn from_relation(rel: Relation, produced_by: u64, ordered: bool) -> Self {
        Self {
            rows: rel.rows,
            schema: rel.schema,
            produced_by,
            answer_text: None,
            ordered,
        }
    }

    pub fn relation(&self) -> Relation {
        Relation::new(self.schema.clone(), self.rows.clone())
    }

    /// Row comparison honoring `ordered`.
    pub fn same_rows(&self, other: &Document) -> bool {
        let names = |d: &Document| d.schema.iter().map(|c| c.name.clone()).collect::<Vec<_>>();
        if names(self) != names(other) {
            return false;
        }
        if self.ordered {
            self.rows == other.rows
        } else {
            self.relation().same_rows_unordered(&other.relation())
        }
    }
}

/// Whether an SQL body imposes an output order at its outermost level.
pub fn sql_is_ordered(body: &str) -> bool {
    let upper = body.to_ascii_uppercase();
    // Only an ORDER BY after the last closing parenthesis applies to the
    // outer query.
    let tail = match upper.rfind(')') {
        Some(i) => &upper[i..],
        None => &upper[..],
    };
    tail.split_whitespace()
        .collect::<Vec<_>>()
        .windows(2)
        .any(|w| w[0] == "ORDER" && w[1] == "BY")
}
