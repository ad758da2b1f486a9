use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use quarry_cli::harness::{run_suite, write_report};
use quarry_cli::run::{fresh_session_id, run_session, Engine};
use quarry_cli::{eval, scale};
use quarry_core::conductor::{ConductorError, PlannerConfig};
use quarry_core::db::DbError;
use quarry_core::lm::{LmError, LmService, RecordingProvider, Trace};
use quarry_core::retriever::RetrieverError;

#[derive(Parser)]
#[command(name = "quarry", version, about = "Conversational data discovery and preparation over a table corpus")]
struct Cli {
    /// Store directory (catalog, workspaces, indexes).
    #[arg(long, global = true, env = "QUARRY_ROOT", default_value = "quarry-data")]
    root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Ingest every CSV/Parquet file under a directory as one dataset.
    Ingest {
        path: PathBuf,
        #[arg(long)]
        dataset: String,
    },
    /// Build the retrieval index for a dataset.
    Index { dataset: String },
    /// Ask one question in a fresh session and print the answer.
    Ask {
        dataset: String,
        question: String,
        /// Play back a recorded trace instead of calling a model.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Record the model's replies into a trace file.
        #[arg(long, conflicts_with = "trace")]
        record: Option<PathBuf>,
        /// Answer without a target model (ablation).
        #[arg(long)]
        direct: bool,
        #[arg(long)]
        no_context_extract: bool,
    },
    /// Re-run a recorded trace and diff its Document with the recorded one.
    Replay { trace: PathBuf },
    /// Run a question suite and report answer quality.
    Eval {
        suite: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Directory for results.csv and results.json.
        #[arg(long, default_value = "eval-results")]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate/ingest a two-table corpus, or time one scripted turn on it.
    ScaleSmoke {
        #[command(subcommand)]
        step: SmokeStep,
    },
}

#[derive(Subcommand)]
enum SmokeStep {
    Prepare {
        #[arg(long, default_value_t = 1024)]
        size_mb: u64,
    },
    Run,
}

/// Exit codes by failure class.
#[derive(Debug, Clone, Copy)]
enum Failure {
    Internal = 1,
    Diff = 3,
    Provider = 4,
    Data = 5,
    Input = 6,
}

impl Failure {
    fn name(self) -> &'static str {
        match self {
            Failure::Internal => "internal",
            Failure::Diff => "diff",
            Failure::Provider => "provider",
            Failure::Data => "data",
            Failure::Input => "input",
        }
    }
}

#[derive(Debug)]
struct DiffFound(String);

impl std::error::Error for DiffFound {}

impl std::fmt::Display for DiffFound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn classify(e: &anyhow::Error) -> Failure {
    for cause in e.chain() {
        if cause.is::<DiffFound>() {
            return Failure::Diff;
        }
        if cause.is::<LmError>() {
            return Failure::Provider;
        }
        if let Some(c) = cause.downcast_ref::<ConductorError>() {
            return match c {
                ConductorError::Lm(_) => Failure::Provider,
                _ => Failure::Data,
            };
        }
        if let Some(r) = cause.downcast_ref::<RetrieverError>() {
            return match r {
                RetrieverError::Lm(_) => Failure::Provider,
                _ => Failure::Data,
            };
        }
        if cause.is::<DbError>() {
            return Failure::Data;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() || cause.is::<serde_yaml::Error>() {
            return Failure::Input;
        }
    }
    Failure::Internal
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("QUARRY_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = classify(&e);
            let line = serde_json::json!({"error": class.name(), "message": format!("{e:#}")});
            eprintln!("{line}");
            ExitCode::from(class as u8)
        }
    }
}

fn live_lm() -> anyhow::Result<LmService> {
    Ok(LmService::from_env()?)
}

/// Model service for commands that may run offline: scripted when no live
/// provider is configured.
fn lm_or_offline() -> LmService {
    LmService::from_env().unwrap_or_else(|_| LmService::scripted(Vec::new()))
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let root = cli.root;
    match cli.cmd {
        Cmd::Ingest { path, dataset } => {
            let engine = Engine::open(&root, LmService::scripted(Vec::new()))?;
            let tables = engine.db.ingest_dataset(&path, &dataset)?;
            for t in &tables {
                println!("{}\t{} rows\t{}", t.table_id, t.row_count, t.column_names.join(","));
            }
            println!("ingested {} tables into {dataset}", tables.len());
        }
        Cmd::Index { dataset } => {
            let engine = Engine::open(&root, lm_or_offline())?;
            let idx = engine.retriever.build_index(&dataset)?;
            println!("indexed {} tables{}", idx.summaries.len(), if idx.degraded { " (lexical only)" } else { "" });
        }
        Cmd::Ask { dataset, question, trace, record, direct, no_context_extract } => {
            ask(&root, &dataset, &question, trace.as_deref(), record.as_deref(), direct, no_context_extract)?
        }
        Cmd::Replay { trace } => replay(&root, &trace)?,
        Cmd::Eval { suite, parallel, out } => {
            let items = eval::load_suite(&suite).with_context(|| format!("loading {}", suite.display()))?;
            let live = if items.iter().all(|i| i.trace.is_some()) { None } else { Some(live_lm()?) };
            let engine = Engine::open(&root, live.clone().unwrap_or_else(|| LmService::scripted(Vec::new())))?;
            let report = run_suite(&engine, live.as_ref(), PlannerConfig::default(), &items, parallel);
            write_report(&report, &out)?;
            for r in &report.results {
                println!(
                    "{}\t{}\tscore={:.3}\ttotal={:.3}s llm={:.3}s non_llm={:.3}s{}",
                    r.id,
                    if r.correct { "ok" } else { "wrong" },
                    r.score,
                    r.total_secs,
                    r.llm_secs,
                    r.non_llm_secs,
                    if r.error.is_empty() { String::new() } else { format!("\terror: {}", r.error) }
                );
            }
            println!(
                "answer quality {:.1}% ({}/{} correct); results in {}",
                report.answer_quality * 100.0,
                report.correct,
                report.questions,
                out.display()
            );
        }
        Cmd::Serve { config } => {
            let mut cfg = quarry_server::ApiConfig::load(config.as_deref())?;
            if config.is_none() && std::env::var_os("QUARRY_ROOT").is_none() {
                cfg.corpus_root = root;
            }
            std::fs::create_dir_all(&cfg.corpus_root)?;
            tokio::runtime::Runtime::new()?.block_on(quarry_server::serve(cfg))?;
        }
        Cmd::ScaleSmoke { step } => match step {
            SmokeStep::Prepare { size_mb } => {
                let m = scale::prepare(&root, size_mb << 20)?;
                println!("{}", serde_json::to_string(&m)?);
            }
            SmokeStep::Run => {
                let r = scale::run(&root)?;
                println!("{}", serde_json::to_string(&r)?);
            }
        },
    }
    Ok(())
}

fn ask(
    root: &Path,
    dataset: &str,
    question: &str,
    trace: Option<&Path>,
    record: Option<&Path>,
    direct: bool,
    no_context_extract: bool,
) -> anyhow::Result<()> {
    let planner = PlannerConfig { direct_synthesis: direct, disable_context_extract: no_context_extract, ..Default::default() };
    let (engine, conductor, recorder) = match trace {
        Some(p) => {
            let t = Trace::load(p).with_context(|| format!("loading trace {}", p.display()))?;
            let engine = Engine::open(root, LmService::scripted(Vec::new()))?;
            let c = engine.traced(&t, planner);
            (engine, c, None)
        }
        None => {
            let live = live_lm()?;
            let engine = Engine::open(root, live.clone())?;
            let recorder = record.map(|_| Arc::new(RecordingProvider::new(live.provider())));
            let lm = recorder.clone().map(|r| LmService::new(r));
            let c = engine.conductor(lm, planner);
            (engine, c, recorder)
        }
    };
    let id = fresh_session_id("ask");
    let out = run_session(&conductor, &id, &[dataset.to_string()], &[question.to_string()])?;
    let reply = out.replies.last().expect("one turn");
    println!("{}\n", reply.text);
    println!("session {id} ({:?}, {} iterations)", reply.kind, reply.iterations);
    print!("{}", out.session.model.describe());
    if out.session.model.transformation.is_some() {
        let script = conductor.derivation_script(&out.session)?;
        let dir = root.join("scripts");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{id}.sql"));
        std::fs::write(&path, script)?;
        println!("derivation script: {}", path.display());
    }
    println!(
        "time {:.3}s (llm {:.3}s, engine {:.3}s), {} model calls",
        out.total.as_secs_f64(),
        out.llm.as_secs_f64(),
        out.non_llm().as_secs_f64(),
        out.session.usage.calls
    );
    if let (Some(path), Some(rec)) = (record, recorder) {
        let t = Trace {
            dataset: Some(dataset.to_string()),
            messages: vec![question.to_string()],
            replies: rec.recorded(),
            document: out.session.document.clone(),
            direct_synthesis: direct,
            disable_context_extract: no_context_extract,
            reply_delay_ms: None,
        };
        t.save(path)?;
        println!("trace written to {}", path.display());
    }
    drop(engine);
    Ok(())
}

fn replay(root: &Path, path: &Path) -> anyhow::Result<()> {
    let t = Trace::load(path).with_context(|| format!("loading trace {}", path.display()))?;
    let Some(dataset) = t.dataset.clone() else { bail!("trace has no dataset") };
    let Some(recorded) = t.document.clone() else { bail!("trace has no recorded document to compare with") };
    let engine = Engine::open(root, LmService::scripted(Vec::new()))?;
    let c = engine.traced(&t, PlannerConfig::default());
    let id = fresh_session_id("replay");
    let out = run_session(&c, &id, &[dataset], &t.messages)?;
    let Some(doc) = out.session.document else {
        return Err(DiffFound("replay produced no document".into()).into());
    };
    if doc.same_rows(&recorded) {
        println!("no differences ({} rows)", doc.rows.len());
        return Ok(());
    }
    let a = doc.relation().row_multiset();
    let b = recorded.relation().row_multiset();
    let mut lines = Vec::new();
    for (row, n) in &b {
        let m = a.get(row).copied().unwrap_or(0);
        if m < *n {
            lines.push(format!("- {:?} (x{})", row, n - m));
        }
    }
    for (row, n) in &a {
        let m = b.get(row).copied().unwrap_or(0);
        if m < *n {
            lines.push(format!("+ {:?} (x{})", row, n - m));
        }
    }
    if lines.is_empty() {
        lines.push("same rows, different order".into());
    }
    println!("{}", lines.join("\n"));
    Err(DiffFound(format!("document differs from the recording ({} lines)", lines.len())).into())
}
