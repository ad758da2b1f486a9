use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value as Json};

use quarry_cli::run::{run_session, Engine};
use quarry_core::conductor::PlannerConfig;
use quarry_core::lm::{LmService, ScriptedReply, Trace};
use quarry_core::value::Value;

fn quarry(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quarry"))
        .arg("--root")
        .arg(root)
        .args(args)
        .env_remove("QUARRY_LM_PROVIDER")
        .env_remove("QUARRY_LM_ENDPOINT")
        .output()
        .unwrap()
}

struct Lake {
    dir: tempfile::TempDir,
}

impl Lake {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("csv");
        std::fs::create_dir_all(&data).unwrap();
        for (s, n) in [("ohio", 410), ("utah", 220), ("iowa", 130)] {
            std::fs::write(data.join(format!("state_{s}_reports.csv")), format!("state,reports\n{s},{n}\n")).unwrap();
        }
        let lake = Self { dir };
        let out = quarry(&lake.root(), &["ingest", data.to_str().unwrap(), "--dataset", "lake"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        lake
    }

    fn root(&self) -> PathBuf {
        self.dir.path().join("store")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn plan(actions: Json) -> ScriptedReply {
    ScriptedReply::json(json!({"analysis": "plan", "actions": actions}))
}

fn modeled(question: &str, s: &str) -> Trace {
    let view = json!({"view_id": "all_reports", "columns": [
        {"name": "state", "declared_type": "text", "description": "state"},
        {"name": "reports", "declared_type": "integer", "description": "reports"}
    ]});
    Trace {
        dataset: Some("lake".into()),
        messages: vec![question.into()],
        replies: vec![
            plan(json!([
                {"kind": "model_update", "add_views": [view], "transformation": {"kind": "sql", "body": s, "declared_inputs": ["all_reports"]}},
                {"kind": "materialize"}
            ])),
            plan(json!([{"kind": "union", "pattern": "state_.*_reports", "output": "all_reports"}])),
            plan(json!([{"kind": "executor"}, {"kind": "user_communicate", "text": "Done."}])),
            ScriptedReply::text("See the result."),
        ],
        ..Default::default()
    }
}

fn direct(question: &str, sql: &str) -> Trace {
    Trace {
        dataset: Some("lake".into()),
        messages: vec![question.into()],
        replies: vec![
            plan(json!([{"kind": "executor", "transformation": {"kind": "sql", "body": sql}}, {"kind": "user_communicate", "text": "Done."}])),
            ScriptedReply::text("See the result."),
        ],
        direct_synthesis: true,
        ..Default::default()
    }
}

#[test]
fn scripted_suite_scores_full_marks() {
    let lake = Lake::new();
    modeled("How many reports were filed in total?", "SELECT sum(reports) AS answer FROM all_reports").save(&lake.path("q1.json")).unwrap();
    direct("How many reports did Utah file?", "SELECT reports AS answer FROM state_utah_reports").save(&lake.path("q2.json")).unwrap();
    modeled("Which states filed more than 200 reports?", "SELECT state AS answer FROM all_reports WHERE reports > 200")
        .save(&lake.path("q3.json"))
        .unwrap();
    let suite = "\
- id: total
  question: How many reports were filed in total?
  dataset: lake
  expected: 760
  trace: q1.json
- id: utah
  question: How many reports did Utah file?
  dataset: lake
  expected: 220
  trace: q2.json
- id: over_200
  question: Which states filed more than 200 reports?
  dataset: lake
  expected: [Ohio, Utah]
  trace: q3.json
";
    std::fs::write(lake.path("suite.yaml"), suite).unwrap();
    let out_dir = lake.path("results");
    let out = quarry(&lake.root(), &["eval", lake.path("suite.yaml").to_str().unwrap(), "--parallel", "2", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Json = serde_json::from_str(&std::fs::read_to_string(out_dir.join("results.json")).unwrap()).unwrap();
    assert_eq!(report["answer_quality"], json!(1.0), "{report:#}");
    assert_eq!(report["correct"], json!(3));
    for r in report["results"].as_array().unwrap() {
        let (t, l, n) = (r["total_secs"].as_f64().unwrap(), r["llm_secs"].as_f64().unwrap(), r["non_llm_secs"].as_f64().unwrap());
        assert!((t - (l + n)).abs() <= 0.01 * t.max(1e-3), "{r}");
    }
    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("answer quality 100.0%"));
}

#[test]
fn replay_matches_recording_and_flags_a_tampered_one() {
    let lake = Lake::new();
    let mut trace = modeled("How many reports were filed in total?", "SELECT sum(reports) AS answer FROM all_reports");
    {
        let engine = Engine::open(&lake.root(), LmService::scripted(Vec::new())).unwrap();
        let c = engine.traced(&trace, PlannerConfig::default());
        let out = run_session(&c, "recording", &["lake".into()], &trace.messages).unwrap();
        trace.document = out.session.document;
    }
    assert_eq!(trace.document.as_ref().unwrap().rows, vec![vec![Value::Integer(760)]]);
    trace.save(&lake.path("t.json")).unwrap();
    let out = quarry(&lake.root(), &["replay", lake.path("t.json").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("no differences"));

    trace.document.as_mut().unwrap().rows[0][0] = Value::Integer(761);
    trace.save(&lake.path("bad.json")).unwrap();
    let out = quarry(&lake.root(), &["replay", lake.path("bad.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err: Json = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "diff");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("- [Integer(761)]") && stdout.contains("+ [Integer(760)]"), "{stdout}");
}

#[test]
fn ask_with_trace_prints_answer_and_script() {
    let lake = Lake::new();
    modeled("How many reports were filed in total?", "SELECT sum(reports) AS answer FROM all_reports").save(&lake.path("q.json")).unwrap();
    let out = quarry(&lake.root(), &["ask", "lake", "How many reports were filed in total?", "--trace", lake.path("q.json").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("Done."), "{stdout}");
    let script = stdout.lines().find_map(|l| l.strip_prefix("derivation script: ")).expect("script path");
    assert!(std::fs::read_to_string(script).unwrap().contains("all_reports"));
}

#[test]
fn failures_exit_with_their_class() {
    let lake = Lake::new();
    let out = quarry(&lake.root(), &["replay", lake.path("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(6));
    let err: Json = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "input");

    // no provider configured
    let out = quarry(&lake.root(), &["ask", "lake", "anything?"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
