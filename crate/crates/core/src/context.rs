//! Planner working context: read-only probes and the action log that
//! planners see on their next iteration.

use serde::{Deserialize, Serialize};

use crate::db::{DbService, ProbeResult};

pub const PROBE_ROW_LIMIT: usize = 50;
/// Action records shown verbatim in prompts; older ones are compacted.
pub const RECENT_RECORDS: usize = 10;
const RENDERED_PROBE_ROWS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub purpose: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub purpose: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ProbeResult>,
    /// Query failures are data, not errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ProbeOutcome {
    pub fn render(&self) -> String {
        let mut out = format!("probe ({}): {}\n", self.purpose, self.query.trim());
        match (&self.result, &self.error) {
            (Some(r), _) => {
                out.push_str(&r.relation.render_table(RENDERED_PROBE_ROWS));
                out.push('\n');
                if r.truncated {
                    out.push_str(&format!("(truncated at {} rows)\n", r.row_limit_applied));
                }
            }
            (None, Some(e)) => out.push_str(&format!("error: {e}\n")),
            (None, None) => {}
        }
        out
    }
}

/// Run each probe read-only with the probe row limit.
pub fn run_probes(db: &DbService, workspace_id: &str, probes: &[Probe]) -> Vec<ProbeOutcome> {
    probes
        .iter()
        .map(|p| {
            let (result, error) = match db.execute_query(workspace_id, &p.query, Some(PROBE_ROW_LIMIT)) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            ProbeOutcome { purpose: p.purpose.clone(), query: p.query.clone(), result, error }
        })
        .collect()
}

/// One executed planner action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub iteration: usize,
    pub kind: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<ProbeOutcome>,
}

impl ActionRecord {
    pub fn ok(iteration: usize, kind: &str, summary: impl Into<String>) -> Self {
        Self { iteration, kind: kind.to_string(), summary: summary.into(), error: None, probes: Vec::new() }
    }

    pub fn failed(iteration: usize, kind: &str, summary: impl Into<String>, error: impl Into<String>) -> Self {
        Self { error: Some(error.into()), ..Self::ok(iteration, kind, summary) }
    }

    pub fn render(&self) -> String {
        let mut out = format!("[iteration {}] {}: {}", self.iteration, self.kind, self.summary);
        if let Some(e) = &self.error {
            out.push_str(&format!("\n  ERROR: {e}"));
        }
        out.push('\n');
        out
    }
}

/// Prompt rendering of the action log: the last [`RECENT_RECORDS`] in full,
/// earlier ones folded into one line each, and every probe's purpose with
/// its truncated result.
pub fn render_working_context(records: &[ActionRecord]) -> String {
    let split = records.len().saturating_sub(RECENT_RECORDS);
    let (old, recent) = records.split_at(split);
    let mut out = String::new();
    if !old.is_empty() {
        out.push_str(&format!("Earlier actions ({}):\n", old.len()));
        for r in old {
            let status = if r.error.is_some() { "failed" } else { "ok" };
            let head: String = r.summary.lines().next().unwrap_or("").chars().take(120).collect();
            out.push_str(&format!("  - it{} {} [{status}] {head}\n", r.iteration, r.kind));
        }
    }
    if !recent.is_empty() {
        out.push_str("Recent actions:\n");
        for r in recent {
            out.push_str(&r.render());
        }
    }
    let probes: Vec<&ProbeOutcome> = records.iter().flat_map(|r| &r.probes).collect();
    if !probes.is_empty() {
        out.push_str("Probe results:\n");
        for p in probes {
            out.push_str(&p.render());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn old_records_are_folded() {
        let records: Vec<ActionRecord> = (0..13).map(|i| ActionRecord::ok(i, "retrieve", format!("query {i}\nmore"))).collect();
        let text = render_working_context(&records);
        assert!(text.contains("Earlier actions (3)"));
        assert!(text.contains("it0 retrieve [ok] query 0\n"));
        assert_eq!(text.matches("more").count(), RECENT_RECORDS);
    }

    #[test]
    fn probe_purposes_survive_compaction() {
        let mut first = ActionRecord::ok(1, "context_extract", "1 probe");
        first.probes.push(ProbeOutcome { purpose: "capital values".into(), query: "SELECT 1".into(), result: None, error: Some("boom".into()) });
        let mut records = vec![first];
        records.extend((0..12).map(|i| ActionRecord::ok(i + 2, "enumerate", "x")));
        let text = render_working_context(&records);
        assert!(text.contains("probe (capital values): SELECT 1\nerror: boom"));
    }
}
