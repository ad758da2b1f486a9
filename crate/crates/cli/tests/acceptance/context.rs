//! A worldcities-style table whose `capital` column uses codes
//! (primary/admin/minor). Probing the codes first yields the right filter;
//! without probes the plausible non-null filter gives a different answer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use quarry_core::conductor::PlannerConfig;
use quarry_core::lm::{ScriptedReply, Trace};

use crate::common::{play, scalar, write_csv, Played, Store};
use crate::{Ctx, Outcome};

const DATASET: &str = "worldcities";
const QUESTION: &str =
    "What is the average latitude of national capital cities, counting one capital per country (the most populous where a country has several)? Round to 4 decimal places.";
const RIGHT: &str = "capital = 'primary'";
const WRONG: &str = "capital IS NOT NULL AND capital <> ''";
const S: &str = "SELECT round(avg(lat), 4) AS answer FROM (SELECT lat, ROW_NUMBER() OVER (PARTITION BY country ORDER BY population DESC) AS rn FROM capitals) WHERE rn = 1";

struct City {
    country: String,
    lat: f64,
    population: i64,
    capital: Option<&'static str>,
}

fn fixture(rng: &mut ChaCha8Rng) -> Vec<City> {
    let mut out = Vec::new();
    let mut pop = 0i64;
    let mut next_pop = |rng: &mut ChaCha8Rng| {
        pop += rng.gen_range(1..5000);
        pop
    };
    for c in 0..30 {
        let country = format!("Country {c:02}");
        let mut add = |capital, rng: &mut ChaCha8Rng, pop: i64| {
            let lat = (rng.gen_range(-600_000..700_000) as f64) / 10_000.0;
            out.push(City { country: country.clone(), lat, population: pop, capital });
        };
        let primaries = if c % 11 == 3 { 2 } else { 1 };
        for _ in 0..primaries {
            let p = next_pop(rng) + 2_000_000;
            add(Some("primary"), rng, p);
        }
        for i in 0..rng.gen_range(2..5) {
            // a third of the countries have an admin centre larger than the capital
            let p = next_pop(rng) + if c % 3 == 0 && i == 0 { 9_000_000 } else { 0 };
            add(Some("admin"), rng, p);
        }
        for _ in 0..rng.gen_range(1..4) {
            let p = next_pop(rng);
            add(Some("minor"), rng, p);
        }
        for _ in 0..rng.gen_range(2..6) {
            let p = next_pop(rng);
            add(None, rng, p);
        }
    }
    out
}

/// Mean latitude of the most populous city per country among `keep`,
/// rounded to 4 places.
fn oracle(cities: &[City], keep: impl Fn(&City) -> bool) -> f64 {
    let mut best: BTreeMap<&str, &City> = BTreeMap::new();
    for c in cities.iter().filter(|c| keep(c)) {
        let e = best.entry(&c.country).or_insert(c);
        if c.population > e.population {
            *e = c;
        }
    }
    let mean = best.values().map(|c| c.lat).sum::<f64>() / best.len() as f64;
    (mean * 10_000.0).round() / 10_000.0
}

fn plan(analysis: &str, actions: serde_json::Value) -> ScriptedReply {
    ScriptedReply::json(json!({"analysis": analysis, "actions": actions}))
}

fn model_actions(guidance: &str) -> serde_json::Value {
    let view = json!({"view_id": "capitals", "columns": [
        {"name": "country", "declared_type": "text", "description": "country name"},
        {"name": "city", "declared_type": "text", "description": "capital city"},
        {"name": "lat", "declared_type": "real", "description": "latitude"},
        {"name": "population", "declared_type": "integer", "description": "city population"}
    ]});
    json!([
        {"kind": "model_update", "add_views": [view], "transformation": {"kind": "sql", "body": S, "declared_inputs": ["capitals"]}},
        {"kind": "materialize", "guidance": guidance}
    ])
}

fn tail(predicate: &str) -> Vec<ScriptedReply> {
    vec![
        plan(
            "filter the capitals",
            json!([{"kind": "query_exec", "output": "capitals",
                    "sql": format!("SELECT city, country, lat, population FROM worldcities WHERE {predicate}")}]),
        ),
        plan("ready", json!([{"kind": "executor"}, {"kind": "user_communicate", "communication": "answer", "text": "Average capital latitude:"}]))
            .expecting("capitals [materialized"),
        ScriptedReply::text("The average latitude is shown above."),
    ]
}

fn probe_trace() -> Trace {
    let mut replies = vec![
        plan(
            "the capital column's encoding is unknown; look before filtering",
            json!([{"kind": "context_extract", "probes": [
                {"purpose": "values of capital", "query": "SELECT capital, count(*) AS n FROM worldcities GROUP BY capital ORDER BY capital"}
            ]}]),
        )
        .expecting(QUESTION),
        plan("capital='primary' marks national capitals", model_actions("national capitals have capital = 'primary'")).expecting("primary"),
    ];
    replies.extend(tail(RIGHT));
    Trace { dataset: Some(DATASET.into()), messages: vec![QUESTION.into()], replies, ..Default::default() }
}

fn blind_trace() -> Trace {
    let mut replies = vec![plan("capital cities have a capital value", model_actions("keep cities with a capital value")).expecting(QUESTION)];
    replies.extend(tail(WRONG));
    Trace { dataset: Some(DATASET.into()), messages: vec![QUESTION.into()], replies, disable_context_extract: true, ..Default::default() }
}

fn answer(p: &Played) -> Option<f64> {
    scalar(p).and_then(|v| v.as_f64())
}

pub fn check(ctx: &mut Ctx) -> anyhow::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cities = fixture(&mut rng);
    let store = Store::new()?;
    let data = store.data_dir(DATASET)?;
    let rows: Vec<Vec<String>> = cities
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                format!("City {i:03}"),
                c.country.clone(),
                format!("{:.4}", c.lat),
                format!("{:.4}", c.lat / 2.0 + 10.0),
                c.population.to_string(),
                c.capital.unwrap_or("").to_string(),
            ]
        })
        .collect();
    write_csv(&data.join("worldcities.csv"), &["city", "country", "lat", "lng", "population", "capital"], &rows)?;
    store.db().ingest_dataset(&data, DATASET)?;
    store.engine.retriever.build_index(DATASET)?;

    let want = oracle(&cities, |c| c.capital == Some("primary"));
    let wrong_oracle = oracle(&cities, |c| c.capital.is_some());

    let probed = play(&store, &probe_trace(), PlannerConfig::default())?;
    ctx.record_replay("context extraction (probes)", &probed);
    let blind = play(&store, &blind_trace(), PlannerConfig::default())?;
    ctx.record_replay("context extraction (no probes)", &blind);

    let probed_script = probed.conductor.derivation_script(&probed.outcome.session)?;
    let blind_script = blind.conductor.derivation_script(&blind.outcome.session)?;
    let (a, b) = (answer(&probed), answer(&blind));
    let right_predicate = probed_script.contains(RIGHT) && !probed_script.contains(WRONG);
    let wrong_predicate = blind_script.contains(WRONG) && !blind_script.contains("primary");
    let pass = right_predicate
        && wrong_predicate
        && a.is_some_and(|a| (a - want).abs() <= 1e-4)
        && b.is_some_and(|b| (b - wrong_oracle).abs() <= 1e-4 && (b - want).abs() > 1e-4);
    let show = |v: Option<f64>| v.map_or("none".into(), |v| format!("{v:.4}"));
    Ok(Outcome::new(
        pass,
        format!(
            "probed: predicate {RIGHT:?} {}, avg lat {} (oracle {want:.4}); unprobed: predicate {WRONG:?} {}, avg lat {} (differs)",
            if right_predicate { "used" } else { "MISSING" },
            show(a),
            if wrong_predicate { "used" } else { "MISSING" },
            show(b)
        ),
    ))
}
