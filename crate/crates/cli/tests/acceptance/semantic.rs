//! Fuzzy matching: self-matches win, and with beta=0 the ranking is pure
//! trigram Jaccard.

use std::collections::{BTreeMap, BTreeSet};

use quarry_core::lm::LmService;
use quarry_core::materializer::semantic::trigram_similarity;
use quarry_core::materializer::{SemanticJoinConfig, Workbench};
use quarry_core::model::ProvenanceGraph;
use quarry_core::value::Value;

use crate::common::{write_csv, Store};
use crate::{Ctx, Outcome};

const COMPANIES: [&str; 24] = [
    "Acme Corp", "ACME Corporation", "Acme Holdings", "Globex", "Globex International", "Initech", "Initech LLC", "Umbrella Corp",
    "Umbrella Pharmaceuticals", "Hooli", "Hooli XYZ", "Vandelay Industries", "Vandelay Imports", "Stark Industries", "Wayne Enterprises",
    "Wonka Industries", "Cyberdyne Systems", "Soylent Corp", "Tyrell Corporation", "Wallace Corp", "Gringotts", "Oscorp", "Oscorp Industries",
    "Monarch Solutions",
];

/// (left, right, Jaccard of lowercase character trigrams, worked by hand).
const PAIRS: [(&str, &str, u32, u32); 20] = [
    ("abcd", "abce", 1, 3),
    ("night", "nacht", 0, 1),
    ("Paris", "paris", 1, 1),
    ("ab", "ab", 1, 1),
    ("ac", "abc", 0, 1),
    ("hello", "hallo", 1, 5),
    ("banana", "bandana", 1, 3),
    ("color", "colour", 2, 5),
    ("Acme Corp", "Acme Corporation", 1, 2),
    ("aaaa", "aaa", 1, 1),
    ("abc", "xyz", 0, 1),
    ("New York", "York", 1, 3),
    ("data", "date", 1, 3),
    ("Lisbon", "Lisboa", 3, 5),
    ("x", "X", 1, 1),
    ("mississippi", "missouri", 2, 11),
    ("apple pie", "apple", 3, 7),
    ("kitten", "sitting", 1, 8),
    ("receive", "recieve", 1, 9),
    ("Toronto", "Toronto Canada", 5, 12),
];

/// Independent trigram Jaccard.
fn oracle(a: &str, b: &str) -> f64 {
    let grams = |s: &str| -> BTreeSet<String> {
        let lower = s.to_lowercase();
        let cs: Vec<char> = lower.chars().collect();
        if cs.len() < 3 {
            return BTreeSet::from([lower]);
        }
        (0..cs.len() - 2).map(|i| cs[i..i + 3].iter().collect()).collect()
    };
    if a.to_lowercase() == b.to_lowercase() {
        return 1.0;
    }
    let (x, y) = (grams(a), grams(b));
    let inter = x.intersection(&y).count() as f64;
    inter / (x.len() as f64 + y.len() as f64 - inter)
}

fn rows(db: &quarry_core::db::DbService, ws: &str, sql: &str) -> anyhow::Result<Vec<Vec<Value>>> {
    Ok(db.execute_query(ws, sql, None)?.relation.rows)
}

pub fn check(_: &mut Ctx) -> anyhow::Result<Outcome> {
    let store = Store::new()?;
    let data = store.data_dir("names")?;
    write_csv(&data.join("companies.csv"), &["name"], &COMPANIES.iter().map(|c| vec![c.to_string()]).collect::<Vec<_>>())?;
    write_csv(&data.join("left_terms.csv"), &["left_text"], &PAIRS.iter().map(|p| vec![p.0.to_string()]).collect::<Vec<_>>())?;
    write_csv(&data.join("right_terms.csv"), &["right_text"], &PAIRS.iter().map(|p| vec![p.1.to_string()]).collect::<Vec<_>>())?;
    store.db().ingest_dataset(&data, "names")?;
    store.db().open_workspace("fuzzy", &["names".to_string()])?;
    let lm = LmService::scripted(Vec::new());
    let mut graph = ProvenanceGraph::new();
    let mut wb = Workbench::new(store.db(), "fuzzy", &lm, &mut graph);

    // self-join, every pair scored (blended with embeddings)
    let cfg = SemanticJoinConfig { left_cols: vec!["name".into()], right_cols: vec!["name".into()], p: COMPANIES.len(), beta: 0.7 };
    wb.semantic_join("companies", "companies", &cfg, "self_matches")?;
    let mut best: BTreeMap<String, (f64, f64)> = BTreeMap::new(); // name -> (self score, best cross score)
    for r in rows(store.db(), "fuzzy", "SELECT name, right_name, match_score FROM self_matches")? {
        let (l, rt, s) = (r[0].render(), r[1].render(), r[2].as_f64().unwrap_or(f64::NAN));
        let e = best.entry(l.clone()).or_insert((f64::NAN, f64::NEG_INFINITY));
        if l == rt {
            e.0 = s;
        } else {
            e.1 = e.1.max(s);
        }
    }
    let self_ok = best.len() == COMPANIES.len() && best.values().all(|(own, cross)| *own >= *cross);

    // hand values agree with the oracle and with the engine's scorer
    let hand_bad: Vec<&str> = PAIRS
        .iter()
        .filter(|(a, b, n, d)| {
            let want = *n as f64 / *d as f64;
            (oracle(a, b) - want).abs() > 1e-12 || (trigram_similarity(a, b) - want).abs() > 1e-12
        })
        .map(|p| p.0)
        .collect();

    // beta = 0: for each left term, the full ranking of right terms
    let cfg = SemanticJoinConfig { left_cols: vec!["left_text".into()], right_cols: vec!["right_text".into()], p: PAIRS.len(), beta: 0.0 };
    wb.semantic_join("left_terms", "right_terms", &cfg, "ranked")?;
    let mut got: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for r in rows(store.db(), "fuzzy", "SELECT left_text, right_text, match_score FROM ranked ORDER BY rowid")? {
        got.entry(r[0].render()).or_default().push((r[1].render(), r[2].as_f64().unwrap_or(f64::NAN)));
    }
    let mut order_bad = Vec::new();
    for (l, ..) in PAIRS {
        let mut want: Vec<(usize, f64)> = PAIRS.iter().enumerate().map(|(j, p)| (j, oracle(l, p.1))).collect();
        want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let want: Vec<&str> = want.iter().map(|w| PAIRS[w.0].1).collect();
        let ranking = got.get(l).map(|v| v.iter().map(|x| x.0.as_str()).collect::<Vec<_>>()).unwrap_or_default();
        let scores_ok = got.get(l).is_some_and(|v| v.iter().all(|(r, s)| (oracle(l, r) - s).abs() <= 1e-12));
        if ranking != want || !scores_ok {
            order_bad.push(l);
        }
    }

    let pass = self_ok && hand_bad.is_empty() && order_bad.is_empty();
    let mut detail = format!(
        "self-join over {} names: self-match >= every cross-match: {self_ok}; {} hand-computed pairs, {} disagree; beta=0 rankings of {} left terms, {} differ from the oracle",
        COMPANIES.len(),
        PAIRS.len(),
        hand_bad.len(),
        PAIRS.len(),
        order_bad.len()
    );
    if !hand_bad.is_empty() || !order_bad.is_empty() {
        detail.push_str(&format!("; hand {hand_bad:?}, order {order_bad:?}"));
    }
    Ok(Outcome::new(pass, detail))
}
