//! Keyword scan counts and content scores against brute-force oracles.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quarry_core::db::{ContentScan, KeywordHits};
use quarry_core::retriever::content_scores;

use crate::common::{write_csv, Store};
use crate::{Ctx, Outcome};

const LIMIT: Duration = Duration::from_secs(10);
const TABLES: usize = 40;
const FIXTURES: usize = 1000;

// overlapping words so substring hits cross word boundaries ("ore" in "core", "store")
const VOCAB: [&str; 14] =
    ["store", "core", "ore", "Orchard", "harbor", "bor", "lamp", "CLAMP", "ledger", "edge", "river", "Riverside", "mint", "print"];
const COLUMNS: [&str; 8] = ["store_id", "core_value", "label", "harbor_name", "notes", "edge_count", "region", "ledger_ref"];

struct Fixture {
    columns: Vec<String>,
    cells: Vec<Vec<String>>,
}

fn cell(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..10) {
        0 => String::new(),
        1 => rng.gen_range(0..5000).to_string(),
        2..=4 => format!("{} {}", VOCAB[rng.gen_range(0..VOCAB.len())], VOCAB[rng.gen_range(0..VOCAB.len())]),
        _ => VOCAB[rng.gen_range(0..VOCAB.len())].to_string(),
    }
}

/// Cells containing `kw`, plus column names containing it.
fn oracle_counts(f: &Fixture, kw: &str) -> (u64, u64) {
    let kw = kw.to_lowercase();
    let cells = f.cells.iter().flatten().filter(|c| !c.is_empty() && c.to_lowercase().contains(&kw)).count();
    let cols = f.columns.iter().filter(|c| c.to_lowercase().contains(&kw)).count();
    (cells as u64, cols as u64)
}

/// Direct evaluation of the mean over keywords of ln(1+tf)/max ln(1+tf).
fn oracle_scores(counts: &BTreeMap<String, Vec<(u64, u64)>>, nk: usize, w_col: f64) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (t, hits) in counts {
        let mut total = 0.0;
        for k in 0..nk {
            let damp = |h: &(u64, u64)| (1.0 + h.0 as f64 + w_col * h.1 as f64).ln();
            let max = counts.values().map(|hs| damp(&hs[k])).fold(0.0, f64::max);
            if max > 0.0 {
                total += damp(&hits[k]) / max;
            }
        }
        out.insert(t.clone(), total / nk as f64);
    }
    out
}

fn random_scan(rng: &mut ChaCha8Rng) -> ContentScan {
    let nk = rng.gen_range(1..=6);
    let nt = rng.gen_range(1..=12);
    ContentScan {
        keywords: (0..nk).map(|k| format!("k{k}")).collect(),
        truncated: false,
        tables: (0..nt)
            .map(|t| {
                let hits = (0..nk)
                    .map(|_| KeywordHits {
                        tf_cells: if rng.gen_bool(0.3) { 0 } else { rng.gen_range(0..500) },
                        tf_colnames: rng.gen_range(0..3),
                    })
                    .collect();
                (format!("t{t}"), hits)
            })
            .collect(),
    }
}

pub fn check(_: &mut Ctx) -> anyhow::Result<Outcome> {
    let started = Instant::now();
    let store = Store::new()?;
    let data = store.data_dir("content")?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut fixtures = BTreeMap::new();
    let mut bytes = 0u64;
    for t in 0..TABLES {
        let ncols = rng.gen_range(2..=5);
        let mut columns: Vec<String> = Vec::new();
        while columns.len() < ncols {
            let c = COLUMNS[rng.gen_range(0..COLUMNS.len())].to_string();
            if !columns.contains(&c) {
                columns.push(c);
            }
        }
        let nrows = rng.gen_range(20..200);
        let cells: Vec<Vec<String>> = (0..nrows).map(|_| (0..ncols).map(|_| cell(&mut rng)).collect()).collect();
        let id = format!("content_{t:02}");
        let path = data.join(format!("{id}.csv"));
        write_csv(&path, &columns.iter().map(String::as_str).collect::<Vec<_>>(), &cells)?;
        bytes += std::fs::metadata(&path)?.len();
        fixtures.insert(id, Fixture { columns, cells });
    }
    store.db().ingest_dataset(&data, "content")?;

    let keywords: Vec<String> = ["ORE", "river", "edge", "Lamp", "bor", "store", "print", "42"].iter().map(|s| s.to_string()).collect();
    let scan = store.db().content_scan(&keywords, None)?;

    let mut count_mismatches = Vec::new();
    let mut counts: BTreeMap<String, Vec<(u64, u64)>> = BTreeMap::new();
    for (id, f) in &fixtures {
        let row: Vec<(u64, u64)> = keywords.iter().map(|k| oracle_counts(f, k)).collect();
        for (k, want) in keywords.iter().zip(&row) {
            let got = scan.hits(id, k).map(|h| (h.tf_cells, h.tf_colnames));
            if got != Some(*want) {
                count_mismatches.push(format!("{id}/{k}: {got:?} vs {want:?}"));
            }
        }
        counts.insert(id.clone(), row);
    }

    let w_col = store.engine.retriever.config.w_col;
    let expected = oracle_scores(&counts, keywords.len(), w_col);
    let got = content_scores(&scan, w_col);
    let max_err = expected.iter().map(|(t, e)| (got.get(t).copied().unwrap_or(f64::NAN) - e).abs()).fold(0.0, f64::max);
    let scores_ok = got.len() == expected.len() && max_err <= 1e-12;

    // raising one table's term frequency never lowers its score
    let mut violations = 0;
    for _ in 0..FIXTURES {
        let mut s = random_scan(&mut rng);
        let before = content_scores(&s, w_col);
        let t = format!("t{}", rng.gen_range(0..s.tables.len()));
        let k = rng.gen_range(0..s.keywords.len());
        s.tables.get_mut(&t).expect("table")[k].tf_cells += rng.gen_range(1..50);
        let after = content_scores(&s, w_col);
        if after[&t] < before[&t] {
            violations += 1;
        }
    }

    let elapsed = started.elapsed();
    let pass = bytes <= 1 << 20 && count_mismatches.is_empty() && scores_ok && violations == 0 && elapsed < LIMIT;
    let mut detail = format!(
        "{TABLES} tables ({} KB), {} keywords: {} count mismatches, max score error {max_err:.1e}; monotonicity violations {violations}/{FIXTURES}; {:.2}s < {}s",
        bytes / 1024,
        keywords.len(),
        count_mismatches.len(),
        elapsed.as_secs_f64(),
        LIMIT.as_secs()
    );
    if let Some(m) = count_mismatches.first() {
        detail.push_str(&format!("; first mismatch {m}"));
    }
    Ok(Outcome::new(pass, detail))
}
