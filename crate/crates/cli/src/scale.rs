//! Two-table procurement corpus of a chosen size and a scripted turn over
//! it, for measuring engine-side time and memory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use quarry_core::conductor::PlannerConfig;
use quarry_core::lm::{ScriptedReply, Trace};
use quarry_core::value::Value;

use crate::run::{run_session, Engine};

pub const DATASET: &str = "procurement";
const ITEMS: u32 = 50_000;
const GREEN_EVERY: u32 = 9;
const QUESTION: &str = "What is the grand total amount for purchase order lines that include green products?";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub bytes: u64,
    pub line_rows: u64,
    pub item_rows: u64,
    /// Oracle: sum of `amount_cents` over lines whose item is green.
    pub expected_total_cents: i64,
}

const WORDS: [&str; 16] = [
    "recycled", "steel", "paper", "office", "chair", "solar", "panel", "cable", "toner", "organic", "lab", "glove", "bulk",
    "fiber", "desk", "lamp",
];

fn description(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::with_capacity(260);
    while s.len() < 240 {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
    }
    s
}

fn is_green(item: u32) -> bool {
    item % GREEN_EVERY == 0
}

/// Write `items.csv` and `po_lines.csv` under `dir` totalling about
/// `target_bytes`.
pub fn generate(dir: &Path, target_bytes: u64, seed: u64) -> anyhow::Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = 0u64;

    let mut items = BufWriter::new(File::create(dir.join("items.csv"))?);
    let header = "item_id,item_name,category,is_green\n";
    items.write_all(header.as_bytes())?;
    bytes += header.len() as u64;
    for id in 1..=ITEMS {
        let line = format!(
            "{id},{} {} {id},{},{}\n",
            WORDS[rng.gen_range(0..WORDS.len())],
            WORDS[rng.gen_range(0..WORDS.len())],
            ["supplies", "equipment", "services", "furniture"][id as usize % 4],
            u8::from(is_green(id))
        );
        items.write_all(line.as_bytes())?;
        bytes += line.len() as u64;
    }
    items.flush()?;

    let mut lines = BufWriter::with_capacity(1 << 20, File::create(dir.join("po_lines.csv"))?);
    let header = "line_id,po_number,item_id,quantity,amount_cents,ordered_on,description\n";
    lines.write_all(header.as_bytes())?;
    bytes += header.len() as u64;
    let mut expected = 0i64;
    let mut n = 0u64;
    while bytes < target_bytes {
        n += 1;
        let item = rng.gen_range(1..=ITEMS);
        let cents: i64 = rng.gen_range(100..5_000_000);
        if is_green(item) {
            expected += cents;
        }
        let line = format!(
            "{n},PO{:07},{item},{},{cents},2025-{:02}-{:02},{}\n",
            n / 4,
            rng.gen_range(1..50),
            rng.gen_range(1..=12),
            rng.gen_range(1..=28),
            description(&mut rng)
        );
        lines.write_all(line.as_bytes())?;
        bytes += line.len() as u64;
    }
    lines.flush()?;
    let m = Manifest { bytes, line_rows: n, item_rows: ITEMS as u64, expected_total_cents: expected };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

pub fn source_dir(root: &Path) -> PathBuf {
    root.join("scale_source")
}

/// Generate and ingest the corpus unless it is already present.
pub fn prepare(root: &Path, target_bytes: u64) -> anyhow::Result<Manifest> {
    let src = source_dir(root);
    let engine = Engine::open(root, quarry_core::lm::LmService::scripted(Vec::new()))?;
    if engine.db.datasets().iter().any(|d| d == DATASET) {
        let text = std::fs::read_to_string(src.join("manifest.json"))?;
        return Ok(serde_json::from_str(&text)?);
    }
    let m = generate(&src, target_bytes, 7)?;
    engine.db.ingest_dataset(&src, DATASET)?;
    // the CSVs are no longer needed once ingested
    std::fs::remove_file(src.join("po_lines.csv"))?;
    std::fs::remove_file(src.join("items.csv"))?;
    Ok(m)
}

/// The scripted planner/materializer replies for the fixed question.
pub fn trace() -> Trace {
    let view = json!({"view_id": "green_po_lines", "columns": [
        {"name": "line_id", "declared_type": "integer", "description": "purchase order line"},
        {"name": "amount_cents", "declared_type": "integer", "description": "line amount in cents"}
    ]});
    Trace {
        dataset: Some(DATASET.into()),
        messages: vec![QUESTION.into()],
        replies: vec![
            ScriptedReply::json(json!({"analysis": "lines joined to green items, then summed", "actions": [
                {"kind": "enumerate", "pattern": "po_lines|items"},
                {"kind": "model_update", "add_views": [view],
                 "transformation": {"kind": "sql", "body": "SELECT sum(amount_cents) AS answer FROM green_po_lines", "declared_inputs": ["green_po_lines"]}},
                {"kind": "materialize", "guidance": "keep lines whose item has is_green = 1"}
            ]})),
            ScriptedReply::json(json!({"analysis": "semi-join on the green item ids", "actions": [
                {"kind": "query_exec", "output": "green_po_lines",
                 "sql": "SELECT line_id, amount_cents FROM po_lines WHERE item_id IN (SELECT item_id FROM items WHERE is_green = 1)"}
            ]})),
            ScriptedReply::json(json!({"analysis": "run S", "actions": [
                {"kind": "executor"},
                {"kind": "user_communicate", "communication": "answer", "text": "Grand total computed over green-product lines."}
            ]})),
            ScriptedReply::text("The grand total is shown in the result."),
        ],
        ..Default::default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmokeReport {
    pub total_secs: f64,
    pub llm_secs: f64,
    pub non_llm_secs: f64,
    pub peak_rss_mb: Option<f64>,
    pub answer: Option<i64>,
    pub expected: i64,
    pub correct: bool,
    pub line_rows: u64,
    pub corpus_bytes: u64,
    /// The derivation script reproduced the Document in a fresh workspace
    /// (checked after the measurements).
    pub replayed: bool,
}

/// Peak resident set size of this process, from procfs.
pub fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

/// One end-to-end scripted turn over a prepared corpus.
pub fn run(root: &Path) -> anyhow::Result<SmokeReport> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(source_dir(root).join("manifest.json"))?)?;
    let engine = Engine::open(root, quarry_core::lm::LmService::scripted(Vec::new()))?;
    let t = trace();
    let c = engine.traced(&t, PlannerConfig::default());
    let id = crate::run::fresh_session_id("scale");
    let out = run_session(&c, &id, &[DATASET.to_string()], &t.messages)?;
    let peak = peak_rss_mb();
    let answer = out.session.document.as_ref().and_then(|d| d.rows.first()).and_then(|r| r.first()).and_then(Value::as_i64);
    let report = SmokeReport {
        total_secs: out.total.as_secs_f64(),
        llm_secs: out.llm.as_secs_f64(),
        non_llm_secs: out.non_llm().as_secs_f64(),
        peak_rss_mb: peak,
        answer,
        expected: manifest.expected_total_cents,
        correct: answer == Some(manifest.expected_total_cents),
        line_rows: manifest.line_rows,
        corpus_bytes: manifest.bytes,
        replayed: c.verify_replay(&out.session)?,
    };
    engine.db.drop_workspace(&id)?;
    Ok(report)
}
