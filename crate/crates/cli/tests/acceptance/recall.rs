//! Planted-ground-truth recall: fused retrieval vs summary-only retrieval,
//! and a 20-table family that top-k cannot cover but enumeration can.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quarry_core::retriever::RetrievalQuery;

use crate::common::{write_csv, Store};
use crate::{Ctx, Outcome};

const LIMIT: Duration = Duration::from_secs(60);
const K: usize = 10;
const DATASET: &str = "recall";

struct Domain {
    name: &'static str,
    tables: usize,
    columns: [&'static str; 4],
    /// Column holding planted values and the words it is filled with.
    text_col: usize,
    words: [&'static str; 6],
}

const DOMAINS: [Domain; 3] = [
    Domain {
        name: "shipments",
        tables: 14,
        columns: ["shipment_id", "carrier", "destination", "weight_kg"],
        text_col: 2,
        words: ["Lisbon", "Denver", "Osaka", "Nairobi", "Quito", "Perth"],
    },
    Domain {
        name: "invoices",
        tables: 13,
        columns: ["invoice_id", "vendor", "department", "amount_usd"],
        text_col: 1,
        words: ["Acme", "Globex", "Initech", "Umbrella", "Hooli", "Vandelay"],
    },
    Domain {
        name: "permits",
        tables: 13,
        columns: ["permit_id", "applicant", "district", "fee"],
        text_col: 2,
        words: ["Northgate", "Eastfield", "Southport", "Westbrook", "Midtown", "Harbor"],
    },
];

const PLANTED: [&str; 19] = [
    "Zorvex", "Quillon", "Mardrake", "Veltrin", "Oskaro", "Prynne", "Talbrek", "Yzmira", "Keldor", "Brenvik", "Sarnoth", "Ulvane",
    "Corwick", "Dravenna", "Fenlowe", "Gastrel", "Hollmar", "Istvara", "Jorrun",
];

const STATES: [&str; 20] = [
    "alabama", "alaska", "arizona", "arkansas", "california", "colorado", "delaware", "florida", "georgia", "hawaii", "idaho",
    "illinois", "indiana", "iowa", "kansas", "kentucky", "maine", "maryland", "michigan", "nevada",
];

fn recall(retrieved: &[String], truth: &BTreeSet<String>) -> f64 {
    retrieved.iter().filter(|t| truth.contains(*t)).count() as f64 / truth.len() as f64
}

pub fn check(_: &mut Ctx) -> anyhow::Result<Outcome> {
    let started = Instant::now();
    let store = Store::new()?;
    let data = store.data_dir(DATASET)?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);

    // (query text, entities, ground truth)
    let mut queries: Vec<(String, Vec<String>, BTreeSet<String>)> = Vec::new();
    let mut planted = PLANTED.iter();
    for d in &DOMAINS {
        for i in 0..d.tables {
            let id = format!("{}_ledger_{i:02}", d.name);
            let nrows = rng.gen_range(20..40);
            let mut rows: Vec<Vec<String>> = (0..nrows)
                .map(|r| {
                    (0..4)
                        .map(|c| match c {
                            0 => format!("{}", 1000 + r),
                            3 => rng.gen_range(1..900).to_string(),
                            _ => d.words[rng.gen_range(0..d.words.len())].to_string(),
                        })
                        .collect()
                })
                .collect();
            // planted values sit past the summary sample (first five rows)
            if let Some(p) = if i % 2 == 0 { planted.next() } else { None } {
                let at = rng.gen_range(5..nrows);
                rows[at][d.text_col] = p.to_string();
                let what = d.columns[d.text_col].replace('_', " ");
                queries.push((format!("Which {} records have {what} {p}?", d.name), vec![p.to_lowercase()], BTreeSet::from([id.clone()])));
            }
            write_csv(&data.join(format!("{id}.csv")), &d.columns, &rows)?;
        }
    }
    let family: BTreeSet<String> = STATES.iter().map(|s| format!("state_{s}_fraud_reports")).collect();
    for s in STATES {
        let rows: Vec<Vec<String>> =
            (0..8).map(|i| vec![s.to_string(), format!("{s} metro {i}"), rng.gen_range(10..5000).to_string()]).collect();
        write_csv(&data.join(format!("state_{s}_fraud_reports.csv")), &["state", "metro_area", "fraud_reports"], &rows)?;
    }
    queries.push(("Fraud reports by metro area for every state".into(), vec!["fraud".into()], family.clone()));
    store.db().ingest_dataset(&data, DATASET)?;
    let tables = store.db().dataset_tables(DATASET)?.len();

    let r = &store.engine.retriever;
    r.build_index(DATASET)?;
    let scope = [DATASET.to_string()];
    let (mut fused_sum, mut summary_sum) = (0.0, 0.0);
    let mut family_fused = 0.0;
    let mut family_summary = 0.0;
    for (text, entities, truth) in &queries {
        let mut rq = RetrievalQuery::new(text.clone(), K);
        rq.extracted_entities = entities.clone();
        let fused: Vec<String> = r.fused_retrieve(&mut rq, &scope)?.table_ids().into_iter().map(String::from).collect();
        let mut summary: Vec<String> = r.summary_retrieve(&rq, &scope)?.into_iter().map(|c| c.0).collect();
        summary.truncate(K);
        let (f, s) = (recall(&fused, truth), recall(&summary, truth));
        fused_sum += f;
        summary_sum += s;
        if truth == &family {
            family_fused = f;
            family_summary = s;
        }
    }
    let n = queries.len() as f64;
    let (fused, summary) = (fused_sum / n, summary_sum / n);
    let enumerated: BTreeSet<String> =
        r.enumerate("state_.*_fraud_reports", Some(&scope[..]))?.into_iter().map(|t| t.table_id).collect();
    let family_enum = recall(&enumerated.iter().cloned().collect::<Vec<_>>(), &family);

    let elapsed = started.elapsed();
    let pass = tables == 60
        && queries.len() == 20
        && fused >= summary
        && family_fused < 1.0
        && family_summary < 1.0
        && family_enum == 1.0
        && elapsed < LIMIT;
    Ok(Outcome::new(
        pass,
        format!(
            "{tables} tables, {} queries: recall@{K} fused {:.1}% vs summary-only {:.1}%; state family: fused {:.0}%, summary {:.0}%, enumerate {:.0}%; {:.2}s < {}s",
            queries.len(),
            fused * 100.0,
            summary * 100.0,
            family_fused * 100.0,
            family_summary * 100.0,
            family_enum * 100.0,
            elapsed.as_secs_f64(),
            LIMIT.as_secs()
        ),
    ))
}
