//! 1 GB two-table corpus, one scripted turn, measured in a fresh process so
//! the peak RSS belongs to the turn alone.

use std::path::Path;
use std::process::Command;

use quarry_cli::scale::{Manifest, SmokeReport};

use crate::{Ctx, Outcome};

const SIZE_MB: u64 = 1024;
const NON_LLM_CEILING_SECS: f64 = 5.0;
const RSS_CEILING_MB: f64 = 300.0;

fn quarry(root: &Path, args: &[&str]) -> anyhow::Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_quarry")).arg("--root").arg(root).args(args).output()?;
    anyhow::ensure!(
        out.status.success(),
        "quarry {} failed ({}): {}",
        args.join(" "),
        out.status,
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(String::from_utf8(out.stdout)?)
}

pub fn check(ctx: &mut Ctx) -> anyhow::Result<Outcome> {
    let mb = std::env::var("QUARRY_SCALE_MB").ok().and_then(|s| s.parse().ok()).unwrap_or(SIZE_MB);
    // generated once and kept between runs
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("scale-{mb}mb"));
    let manifest: Manifest = serde_json::from_str(&quarry(&root, &["scale-smoke", "prepare", "--size-mb", &mb.to_string()])?)?;
    let r: SmokeReport = serde_json::from_str(&quarry(&root, &["scale-smoke", "run"])?)?;
    ctx.replays.push(("scalability smoke".into(), Ok(r.replayed)));

    let peak = r.peak_rss_mb.unwrap_or(f64::INFINITY);
    let pass = mb >= SIZE_MB
        && manifest.bytes >= SIZE_MB << 20
        && r.correct
        && r.non_llm_secs < NON_LLM_CEILING_SECS
        && peak < RSS_CEILING_MB;
    Ok(Outcome::new(
        pass,
        format!(
            "{:.2} GB corpus ({} order lines): answer {} (oracle {}), engine time {:.2}s < {NON_LLM_CEILING_SECS}s (total {:.2}s, model {:.3}s), peak RSS {peak:.0} MB < {RSS_CEILING_MB} MB",
            manifest.bytes as f64 / (1u64 << 30) as f64,
            manifest.line_rows,
            r.answer.map_or("none".into(), |a| a.to_string()),
            r.expected,
            r.non_llm_secs,
            r.total_secs,
            r.llm_secs
        ),
    ))
}
