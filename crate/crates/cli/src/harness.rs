//! Runs an evaluation suite and writes CSV/JSON results.

use std::path::Path;
use std::sync::Mutex;

use serde::Serialize;

use quarry_core::conductor::PlannerConfig;
use quarry_core::lm::{LmService, Trace};

use crate::eval::{score, SuiteItem};
use crate::run::{fresh_session_id, run_session, Engine};

#[derive(Debug, Clone, Serialize)]
pub struct QuestionResult {
    pub id: String,
    pub question: String,
    pub expected: String,
    pub produced: String,
    pub score: f64,
    pub correct: bool,
    pub reply_kind: String,
    pub iterations: usize,
    pub llm_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_secs: f64,
    pub llm_secs: f64,
    pub non_llm_secs: f64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    /// Mean score: exact match for scalars, F1 for sets.
    pub answer_quality: f64,
    pub correct: usize,
    pub questions: usize,
    pub results: Vec<QuestionResult>,
}

fn run_one(engine: &Engine, live: Option<&LmService>, planner: PlannerConfig, item: &SuiteItem) -> QuestionResult {
    let id = item.id.clone().unwrap_or_default();
    let mut r = QuestionResult {
        id: id.clone(),
        question: item.question.clone(),
        expected: String::new(),
        produced: String::new(),
        score: 0.0,
        correct: false,
        reply_kind: String::new(),
        iterations: 0,
        llm_calls: 0,
        input_tokens: 0,
        output_tokens: 0,
        total_secs: 0.0,
        llm_secs: 0.0,
        non_llm_secs: 0.0,
        error: String::new(),
    };
    let (conductor, messages) = match &item.trace {
        Some(path) => match Trace::load(path) {
            Ok(t) => {
                let msgs = if t.messages.is_empty() { vec![item.question.clone()] } else { t.messages.clone() };
                (engine.traced(&t, planner), msgs)
            }
            Err(e) => {
                r.error = format!("trace {}: {e}", path.display());
                return r;
            }
        },
        None => (engine.conductor(live.cloned(), planner), vec![item.question.clone()]),
    };
    let session_id = fresh_session_id(&format!("eval_{}", id.replace(|c: char| !c.is_ascii_alphanumeric(), "_")));
    match run_session(&conductor, &session_id, &[item.dataset.clone()], &messages) {
        Ok(out) => {
            let s = score(&item.question, &item.expected, out.session.document.as_ref());
            let last = out.replies.last();
            r.expected = s.expected;
            r.produced = s.produced;
            r.score = s.score;
            r.correct = s.correct;
            r.reply_kind = last.map(|l| format!("{:?}", l.kind).to_lowercase()).unwrap_or_default();
            r.iterations = out.replies.iter().map(|x| x.iterations).sum();
            r.llm_calls = out.session.usage.calls;
            r.input_tokens = out.session.usage.input_tokens;
            r.output_tokens = out.session.usage.output_tokens;
            r.total_secs = out.total.as_secs_f64();
            r.llm_secs = out.llm.as_secs_f64();
            r.non_llm_secs = out.non_llm().as_secs_f64();
        }
        Err(e) => {
            let s = score(&item.question, &item.expected, None);
            r.expected = s.expected;
            r.error = e.to_string();
        }
    }
    r
}

/// Run every item; `parallel` sessions at a time.
pub fn run_suite(engine: &Engine, live: Option<&LmService>, planner: PlannerConfig, items: &[SuiteItem], parallel: usize) -> SuiteReport {
    let results: Mutex<Vec<(usize, QuestionResult)>> = Mutex::new(Vec::new());
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..parallel.max(1).min(items.len().max(1)) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue poisoned");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(item) = items.get(i) else { break };
                let r = run_one(engine, live, planner, item);
                tracing::info!(id = %r.id, correct = r.correct, "question done");
                results.lock().expect("results poisoned").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results poisoned");
    results.sort_by_key(|r| r.0);
    let results: Vec<QuestionResult> = results.into_iter().map(|r| r.1).collect();
    let n = results.len();
    SuiteReport {
        answer_quality: if n == 0 { 0.0 } else { results.iter().map(|r| r.score).sum::<f64>() / n as f64 },
        correct: results.iter().filter(|r| r.correct).count(),
        questions: n,
        results,
    }
}

pub fn write_report(report: &SuiteReport, out_dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("results.csv"))?;
    for r in &report.results {
        w.serialize(r)?;
    }
    w.flush()?;
    std::fs::write(out_dir.join("results.json"), serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}
