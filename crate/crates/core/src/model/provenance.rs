use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{TransformKind, TransformationS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DerivationError {
    #[error("provenance graph contains a cycle through {0}")]
    CycleDetected(String),
    #[error("transformation references {0}, which no provenance node produces")]
    MissingInput(String),
    #[error("unknown provenance node {0}")]
    UnknownNode(String),
    #[error("source table node {0} cannot have incoming edges")]
    SourceHasInput(String),
    #[error("malformed derivation script: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    SourceTable,
    Transformation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceNode {
    pub node_id: String,
    pub kind: NodeKind,
    pub label: String,
    /// Exact operator query or program text that was executed.
    #[serde(default)]
    pub payload: Option<String>,
    #[serde(default)]
    pub payload_kind: Option<TransformKind>,
    #[serde(default)]
    pub output_ref: Option<String>,
    /// Set on the secondary outputs of a script that persisted several
    /// tables: the node whose payload produced this table too.
    #[serde(default)]
    pub shares_payload_with: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
}

/// DAG of source tables and the transformations derived from them.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProvenanceGraph {
    pub nodes: Vec<ProvenanceNode>,
    pub edges: BTreeSet<Edge>,
}

/// Everything needed to append one transformation node.
#[derive(Debug, Clone)]
pub struct TransformationRecord {
    pub label: String,
    pub payload: String,
    pub payload_kind: TransformKind,
    pub output_ref: String,
    pub inputs: Vec<String>,
    pub shares_payload_with: Option<String>,
}

impl ProvenanceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&self, node_id: &str) -> Option<&ProvenanceNode> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn transformation_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Transformation)
            .count()
    }

    pub fn source_node_id(table: &str) -> String {
        format!("src:{table}")
    }

    /// Transformation node that produced `table`, if any.
    pub fn producer_of(&self, table: &str) -> Option<&ProvenanceNode> {
        self.nodes.iter().rev().find(|n| {
            n.kind == NodeKind::Transformation && n.output_ref.as_deref() == Some(table)
        })
    }

    /// Idempotently add a source table node.
    pub fn add_source(&mut self, table: &str) -> String {
        let id = Self::source_node_id(table);
        if self.node(&id).is_none() {
            self.nodes.push(ProvenanceNode {
                node_id: id.clone(),
                kind: NodeKind::SourceTable,
                label: table.to_string(),
                payload: None,
                payload_kind: None,
                output_ref: None,
                shares_payload_with: None,
            });
        }
        id
    }

    /// Append a transformation node wired to the producers of its inputs
    /// (or to source nodes for tables no transformation produced).
    pub fn add_transformation(
        &mut self,
        record: TransformationRecord,
    ) -> Result<String, DerivationError> {
        let node_id = format!("t{:04}", self.transformation_count() + 1);
        let mut upstream = Vec::new();
        for input in &record.inputs {
            if input == &record.output_ref && self.producer_of(input).is_none() {
                return Err(DerivationError::CycleDetected(node_id));
            }
            let from = match self.producer_of(input) {
                Some(p) => p.node_id.clone(),
                None => self.add_source(input),
            };
            upstream.push(from);
        }
        self.nodes.push(ProvenanceNode {
            node_id: node_id.clone(),
            kind: NodeKind::Transformation,
            label: record.label.replace('\n', " "),
            payload: Some(record.payload),
            payload_kind: Some(record.payload_kind),
            output_ref: Some(record.output_ref),
            shares_payload_with: record.shares_payload_with,
        });
        for from in upstream {
            if let Err(e) = self.add_edge(&from, &node_id) {
                self.nodes.retain(|n| n.node_id != node_id);
                self.edges.retain(|e| e.to != node_id && e.from != node_id);
                return Err(e);
            }
        }
        Ok(node_id)
    }

    /// Insert an edge, refusing any that would close a cycle.
    pub fn add_edge(&mut self, from: &str, to: &str) -> Result<(), DerivationError> {
        if self.node(from).is_none() {
            return Err(DerivationError::UnknownNode(from.to_string()));
        }
        match self.node(to) {
            None => return Err(DerivationError::UnknownNode(to.to_string())),
            Some(n) if n.kind == NodeKind::SourceTable => {
                return Err(DerivationError::SourceHasInput(to.to_string()))
            }
            Some(_) => {}
        }
        if from == to || self.reaches(to, from) {
            return Err(DerivationError::CycleDetected(to.to_string()));
        }
        self.edges.insert(Edge {
            from: from.to_string(),
            to: to.to_string(),
        });
        Ok(())
    }

    fn reaches(&self, start: &str, target: &str) -> bool {
        let mut stack = vec![start.to_string()];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == target {
                return true;
            }
            if !seen.insert(n.clone()) {
                continue;
            }
            stack.extend(
                self.edges
                    .iter()
                    .filter(|e| e.from == n)
                    .map(|e| e.to.clone()),
            );
        }
        false
    }

    pub fn inputs_of(&self, node_id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|e| e.to == node_id)
            .map(|e| e.from.as_str())
            .collect()
    }

    /// Kahn's algorithm; among ready nodes the smallest node_id goes first.
    pub fn topological_order(&self) -> Result<Vec<String>, DerivationError> {
        let mut indegree: BTreeMap<&str, usize> =
            self.nodes.iter().map(|n| (n.node_id.as_str(), 0)).collect();
        let mut out_edges: HashMap<&str, Vec<&str>> = HashMap::new();
        for e in &self.edges {
            match indegree.get_mut(e.to.as_str()) {
                Some(d) => *d += 1,
                None => return Err(DerivationError::UnknownNode(e.to.clone())),
            }
            if !indegree.contains_key(e.from.as_str()) {
                return Err(DerivationError::UnknownNode(e.from.clone()));
            }
            out_edges.entry(e.from.as_str()).or_default().push(e.to.as_str());
        }
        let mut ready: BTreeSet<&str> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(n, _)| *n)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(n) = ready.pop_first() {
            order.push(n.to_string());
            for m in out_edges.get(n).into_iter().flatten() {
                let d = indegree.get_mut(m).expect("edge target indexed above");
                *d -= 1;
                if *d == 0 {
                    ready.insert(m);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = indegree
                .iter()
                .find(|(n, d)| **d > 0 && !order.iter().any(|o| o == *n))
                .map(|(n, _)| n.to_string())
                .unwrap_or_default();
            return Err(DerivationError::CycleDetected(stuck));
        }
        Ok(order)
    }

    /// Invariant check: acyclic, sources have no inputs, edges reference
    /// existing nodes.
    pub fn check(&self) -> Result<(), DerivationError> {
        for e in &self.edges {
            if let Some(n) = self.node(&e.to) {
                if n.kind == NodeKind::SourceTable {
                    return Err(DerivationError::SourceHasInput(e.to.clone()));
                }
            }
        }
        self.topological_order().map(|_| ())
    }

    /// Fold another graph's nodes and edges into this one. Node ids already
    /// present are kept as they are.
    pub fn extend(&mut self, other: &ProvenanceGraph) -> Result<(), DerivationError> {
        for n in &other.nodes {
            if self.node(&n.node_id).is_none() {
                self.nodes.push(n.clone());
            }
        }
        for e in &other.edges {
            if !self.edges.contains(e) {
                self.add_edge(&e.from, &e.to)?;
            }
        }
        Ok(())
    }

    /// Nodes and edges present here but not in `base`.
    pub fn delta_since(&self, base: &ProvenanceGraph) -> ProvenanceGraph {
        ProvenanceGraph {
            nodes: self
                .nodes
                .iter()
                .filter(|n| base.node(&n.node_id).is_none())
                .cloned()
                .collect(),
            edges: self.edges.difference(&base.edges).cloned().collect(),
        }
    }
}

const STEP_PREFIX: &str = "-- step ";
const FINAL_PREFIX: &str = "-- final: ";
const SCRIPT_OPEN: &str = "--! script";
const SCRIPT_CLOSE: &str = "--! end";

/// Produce one program that rebuilds every intermediate table in topological
/// order and then applies `s`.
pub fn derivation_script(
    g: &ProvenanceGraph,
    s: &TransformationS,
) -> Result<String, DerivationError> {
    let order = g.topological_order()?;
    for input in &s.declared_inputs {
        let produced = g
            .nodes
            .iter()
            .any(|n| n.output_ref.as_deref() == Some(input.as_str()));
        if !produced {
            return Err(DerivationError::MissingInput(input.clone()));
        }
    }

    let mut out = String::new();
    let mut step = 0;
    for id in &order {
        let node = g.node(id).expect("ordered ids come from the graph");
        if node.kind != NodeKind::Transformation || node.shares_payload_with.is_some() {
            continue;
        }
        let Some(payload) = node.payload.as_deref() else {
            continue;
        };
        step += 1;
        let mut outputs: Vec<&str> = node.output_ref.iter().map(String::as_str).collect();
        outputs.extend(
            g.nodes
                .iter()
                .filter(|n| n.shares_payload_with.as_deref() == Some(id.as_str()))
                .filter_map(|n| n.output_ref.as_deref()),
        );
        out.push_str(&format!(
            "{STEP_PREFIX}{step}: {} [{}] -> {}\n",
            node.label,
            node.node_id,
            outputs.join(", ")
        ));
        push_body(&mut out, node.payload_kind.unwrap_or(TransformKind::Sql), payload);
    }

    if step == 0 {
        out.push_str(s.body.trim());
        out.push('\n');
        return Ok(out);
    }
    let kind = match s.kind {
        TransformKind::Sql => "sql",
        TransformKind::Script => "script",
    };
    out.push_str(&format!("{FINAL_PREFIX}S ({kind})\n"));
    push_body(&mut out, s.kind, &s.body);
    Ok(out)
}

fn push_body(out: &mut String, kind: TransformKind, body: &str) {
    match kind {
        TransformKind::Sql => {
            let body = body.trim().trim_end_matches(';').trim_end();
            out.push_str(body);
            out.push_str(";\n");
        }
        TransformKind::Script => {
            out.push_str(SCRIPT_OPEN);
            out.push('\n');
            out.push_str(body.trim_end());
            out.push('\n');
            out.push_str(SCRIPT_CLOSE);
            out.push('\n');
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepBody {
    Sql(String),
    Script(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivationStep {
    pub header: String,
    pub body: StepBody,
    pub is_final: bool,
}

/// Split a derivation script back into steps. A script with no step headers
/// is the bare body of `S`, whose kind must then be supplied.
pub fn parse_derivation_script(
    text: &str,
    bare_kind: TransformKind,
) -> Result<Vec<DerivationStep>, DerivationError> {
    let is_header = |l: &str| l.starts_with(STEP_PREFIX) || l.starts_with(FINAL_PREFIX);
    if !text.lines().any(is_header) {
        let body = text.trim().to_string();
        return Ok(vec![DerivationStep {
            header: String::new(),
            body: match bare_kind {
                TransformKind::Sql => StepBody::Sql(body),
                TransformKind::Script => StepBody::Script(body),
            },
            is_final: true,
        }]);
    }

    let mut steps = Vec::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        if is_header(line) {
            if let Some((h, lines)) = current.take() {
                steps.push(make_step(h, &lines)?);
            }
            current = Some((line.to_string(), Vec::new()));
        } else {
            match current.as_mut() {
                Some((_, lines)) => lines.push(line),
                None if line.trim().is_empty() => {}
                None => {
                    return Err(DerivationError::Malformed(format!(
                        "text before first step header: {line}"
                    )))
                }
            }
        }
    }
    if let Some((h, lines)) = current.take() {
        steps.push(make_step(h, &lines)?);
    }
    Ok(steps)
}

fn make_step(header: String, lines: &[&str]) -> Result<DerivationStep, DerivationError> {
    let is_final = header.starts_with(FINAL_PREFIX);
    let first = lines.iter().position(|l| !l.trim().is_empty());
    let body = match first {
        Some(i) if lines[i].trim() == SCRIPT_OPEN => {
            let rest = &lines[i + 1..];
            let close = rest
                .iter()
                .rposition(|l| l.trim() == SCRIPT_CLOSE)
                .ok_or_else(|| DerivationError::Malformed(format!("unterminated script in {header}")))?;
            StepBody::Script(rest[..close].join("\n"))
        }
        Some(i) => StepBody::Sql(lines[i..].join("\n").trim().to_string()),
        None => return Err(DerivationError::Malformed(format!("empty step {header}"))),
    };
    Ok(DerivationStep {
        header,
        body,
        is_final,
    })
}
