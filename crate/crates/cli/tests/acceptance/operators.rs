//! join / union / projection against nested-loop, concatenation and
//! column-selection oracles on randomized tables.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quarry_core::lm::LmService;
use quarry_core::materializer::{JoinKey, JoinType, UnionMode, Workbench};
use quarry_core::model::ProvenanceGraph;
use quarry_core::value::Value;

use crate::common::{multiset, write_csv, Store};
use crate::{Ctx, Outcome};

const TABLES: usize = 500;
const MAX_ROWS: usize = 200;
const PAIRS_PER_WORKSPACE: usize = 25;
const NAMES: [&str; 8] = ["n_alder", "n_birch", "n_cedar", "n_dogwood", "n_elm", "n_fir", "n_gum", "n_hazel"];

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Int,
    Text,
    Real,
}

const COLUMNS: [(&str, Kind); 5] = [("k", Kind::Int), ("name", Kind::Text), ("score", Kind::Real), ("note", Kind::Text), ("qty", Kind::Int)];

struct Table {
    id: String,
    columns: Vec<(&'static str, Kind)>,
    raw: Vec<Vec<String>>,
}

impl Table {
    fn values(&self) -> Vec<Vec<Value>> {
        self.raw
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&self.columns)
                    .map(|(s, (_, kind))| match (s.is_empty(), kind) {
                        (true, _) => Value::Null,
                        (_, Kind::Int) => Value::Integer(s.parse().expect("int")),
                        (_, Kind::Real) => Value::Real(s.parse().expect("real")),
                        (_, Kind::Text) => Value::Text(s.clone()),
                    })
                    .collect()
            })
            .collect()
    }

    fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.0.to_string()).collect()
    }

    fn col(&self, name: &str) -> usize {
        self.columns.iter().position(|c| c.0 == name).expect("column")
    }
}

fn raw_cell(kind: Kind, rng: &mut ChaCha8Rng, first_row: bool) -> String {
    if !first_row && rng.gen_bool(0.1) {
        return String::new();
    }
    match kind {
        Kind::Int => rng.gen_range(0..15).to_string(),
        // "-0.00" would come back as 0.0
        Kind::Real => format!("{:.2}", rng.gen_range(-500.0..500.0)).replace("-0.00", "0.00"),
        Kind::Text => NAMES[rng.gen_range(0..NAMES.len())].to_string(),
    }
}

/// Tables come in pairs sharing a column set (the second in shuffled order
/// unless `same_order`), always including the join key `k`.
fn pair(rng: &mut ChaCha8Rng, index: usize, same_order: bool) -> (Table, Table) {
    let mut columns = vec![COLUMNS[0]];
    for c in &COLUMNS[1..] {
        if rng.gen_bool(0.6) {
            columns.push(*c);
        }
    }
    columns.shuffle(rng);
    let mut second = columns.clone();
    if !same_order {
        second.shuffle(rng);
    }
    let mut make = |columns: Vec<(&'static str, Kind)>, id: String| {
        let n = rng.gen_range(1..=MAX_ROWS);
        let raw = (0..n).map(|r| columns.iter().map(|c| raw_cell(c.1, rng, r == 0)).collect()).collect();
        Table { id, columns, raw }
    };
    let a = make(columns, format!("rnd_{:03}", 2 * index));
    let b = make(second, format!("rnd_{:03}", 2 * index + 1));
    (a, b)
}

/// Output names for `left ++ right`, renaming collisions with `right_`.
fn join_names(l: &Table, r: &Table) -> Vec<String> {
    let mut names = l.names();
    for c in r.names() {
        let mut n = c;
        loop {
            let taken = names.iter().any(|x| x.eq_ignore_ascii_case(&n)) || n.eq_ignore_ascii_case("match_score");
            if !taken {
                break;
            }
            n = format!("right_{n}");
        }
        names.push(n);
    }
    names
}

fn nested_loop_join(l: &Table, r: &Table, keys: &[&str], left_join: bool) -> Vec<Vec<Value>> {
    let (lv, rv) = (l.values(), r.values());
    let lk: Vec<usize> = keys.iter().map(|k| l.col(k)).collect();
    let rk: Vec<usize> = keys.iter().map(|k| r.col(k)).collect();
    let mut out = Vec::new();
    for lrow in &lv {
        let mut matched = false;
        for rrow in &rv {
            let eq = lk.iter().zip(&rk).all(|(&i, &j)| !lrow[i].is_null() && !rrow[j].is_null() && lrow[i] == rrow[j]);
            if eq {
                matched = true;
                out.push(lrow.iter().chain(rrow).cloned().collect());
            }
        }
        if left_join && !matched {
            out.push(lrow.iter().cloned().chain(std::iter::repeat(Value::Null).take(r.columns.len())).collect());
        }
    }
    out
}

fn concat_by_name(a: &Table, b: &Table) -> Vec<Vec<Value>> {
    let mut out = a.values();
    let order: Vec<usize> = a.columns.iter().map(|c| b.col(c.0)).collect();
    out.extend(b.values().into_iter().map(|r| order.iter().map(|&i| r[i].clone()).collect()));
    out
}

fn select(t: &Table, cols: &[String]) -> Vec<Vec<Value>> {
    let idx: Vec<usize> = cols.iter().map(|c| t.col(c)).collect();
    t.values().into_iter().map(|r| idx.iter().map(|&i| r[i].clone()).collect()).collect()
}

fn compare(db: &quarry_core::db::DbService, ws: &str, output: &str, names: Vec<String>, rows: Vec<Vec<Value>>) -> Result<(), String> {
    let got = db.execute_query(ws, &format!("SELECT * FROM {output}"), None).map_err(|e| e.to_string())?.relation;
    let got_names: Vec<String> = got.column_names().into_iter().map(String::from).collect();
    if got_names != names {
        return Err(format!("columns {got_names:?} vs {names:?}"));
    }
    if multiset(&got.rows) != multiset(&rows) {
        return Err(format!("{} rows vs oracle {}", got.rows.len(), rows.len()));
    }
    Ok(())
}

pub fn check(_: &mut Ctx) -> anyhow::Result<Outcome> {
    let store = Store::new()?;
    let data = store.data_dir("randomized")?;
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let pairs: Vec<(Table, Table)> = (0..TABLES / 2).map(|i| pair(&mut rng, i, i % 4 == 0)).collect();
    for (a, b) in &pairs {
        for t in [a, b] {
            write_csv(&data.join(format!("{}.csv", t.id)), &t.columns.iter().map(|c| c.0).collect::<Vec<_>>(), &t.raw)?;
        }
    }
    store.db().ingest_dataset(&data, "randomized")?;

    let lm = LmService::scripted(Vec::new());
    let mut results: Vec<(&str, String, Result<(), String>)> = Vec::new();
    for (chunk_no, chunk) in pairs.chunks(PAIRS_PER_WORKSPACE).enumerate() {
        let ws = format!("ops_{chunk_no}");
        store.db().open_workspace(&ws, &["randomized".to_string()])?;
        let mut graph = ProvenanceGraph::new();
        let mut wb = Workbench::new(store.db(), &ws, &lm, &mut graph);
        for (i, (a, b)) in chunk.iter().enumerate() {
            // join: single key, or (k, name) when both sides have name
            let two_keys = i % 3 == 0 && a.columns.iter().any(|c| c.0 == "name");
            let keys: Vec<&str> = if two_keys { vec!["k", "name"] } else { vec!["k"] };
            let left_join = i % 2 == 1;
            let jk: Vec<JoinKey> = keys.iter().map(|k| JoinKey { left: k.to_string(), right: k.to_string() }).collect();
            let out = format!("j_{}", a.id);
            match wb.join(&a.id, &b.id, &jk, if left_join { JoinType::Left } else { JoinType::Inner }, &out) {
                Ok(_) => results.push(("join", out.clone(), compare(wb.db, &ws, &out, join_names(a, b), nested_loop_join(a, b, &keys, left_join)))),
                Err(e) => results.push(("join", out.clone(), Err(e.to_string()))),
            }

            // union: by name after a shuffle, by position when the orders agree
            let mode = if a.names() == b.names() && i % 2 == 0 { UnionMode::ByPosition } else { UnionMode::ByName };
            let out = format!("u_{}", a.id);
            match wb.union(&[a.id.clone(), b.id.clone()], mode, &out) {
                Ok(_) => results.push(("union", out.clone(), compare(wb.db, &ws, &out, a.names(), concat_by_name(a, b)))),
                Err(e) => results.push(("union", out.clone(), Err(e.to_string()))),
            }

            // projection of each table: random subset and order, one rename
            for t in [a, b] {
                let mut cols = t.names();
                cols.shuffle(&mut rng);
                cols.truncate(rng.gen_range(1..=cols.len()));
                let mut renames = BTreeMap::new();
                let mut names = cols.clone();
                if rng.gen_bool(0.5) {
                    renames.insert(cols[0].clone(), format!("{}_renamed", cols[0]));
                    names[0] = format!("{}_renamed", cols[0]);
                }
                let out = format!("p_{}", t.id);
                match wb.projection(&t.id, &cols, &renames, &out) {
                    Ok(_) => results.push(("projection", out.clone(), compare(wb.db, &ws, &out, names, select(t, &cols)))),
                    Err(e) => results.push(("projection", out.clone(), Err(e.to_string()))),
                }
            }
        }
        store.db().drop_workspace(&ws)?;
    }
    let mut checked = BTreeMap::<&str, usize>::new();
    for r in &results {
        *checked.entry(r.0).or_default() += 1;
    }
    let failures: Vec<String> = results.iter().filter_map(|(op, out, r)| r.as_ref().err().map(|e| format!("{op} {out}: {e}"))).collect();
    let counts: Vec<String> = checked.iter().map(|(k, v)| format!("{v} {k}s")).collect();
    let mut detail = format!("{TABLES} tables of 1..={MAX_ROWS} rows; {}; {} mismatches", counts.join(", "), failures.len());
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; first: {f}"));
    }
    Ok(Outcome::new(failures.is_empty() && checked.values().sum::<usize>() == TABLES * 2, detail))
}
