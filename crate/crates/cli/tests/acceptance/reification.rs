//! 52 per-state tables of identity-theft reports. Building a target model
//! with an enumerated union counts every state; answering directly from a
//! top-10 retrieval under-counts.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use quarry_core::conductor::PlannerConfig;
use quarry_core::lm::{ScriptedReply, Trace};
use quarry_core::retriever::RetrievalQuery;

use crate::common::{play, scalar, write_csv, Store};
use crate::{Ctx, Outcome};

const LIMIT: Duration = Duration::from_secs(30);
const TOTAL: i64 = 243_377;
const UNDERCOUNT: i64 = 114_392;
const DATASET: &str = "identity_theft";
const QUESTION: &str = "How many identity theft reports were filed across all US metropolitan areas?";
const QUERY: &str = "identity theft reports by metropolitan area for US states";
const PATTERN: &str = "state_msa_identity_theft_data_.*";

const STATES: [&str; 52] = [
    "alabama", "alaska", "arizona", "arkansas", "california", "colorado", "connecticut", "delaware", "district_of_columbia",
    "florida", "georgia", "hawaii", "idaho", "illinois", "indiana", "iowa", "kansas", "kentucky", "louisiana", "maine",
    "maryland", "massachusetts", "michigan", "minnesota", "mississippi", "missouri", "montana", "nebraska", "nevada",
    "new_hampshire", "new_jersey", "new_mexico", "new_york", "north_carolina", "north_dakota", "ohio", "oklahoma", "oregon",
    "pennsylvania", "puerto_rico", "rhode_island", "south_carolina", "south_dakota", "tennessee", "texas", "utah", "vermont",
    "virginia", "washington", "west_virginia", "wisconsin", "wyoming",
];

fn table_id(state: &str) -> String {
    format!("state_msa_identity_theft_data_{state}")
}

fn entities() -> Vec<String> {
    vec!["identity theft".into(), "metropolitan".into()]
}

/// Per table: five sampled rows, then one balancing row.
type Fixture = BTreeMap<String, (Vec<i64>, i64)>;

fn write(store: &Store, fixture: &Fixture) -> anyhow::Result<()> {
    let data = store.data_dir(DATASET)?;
    for state in STATES {
        let (sample, balance) = &fixture[&table_id(state)];
        let name = state.replace('_', " ");
        let mut rows: Vec<Vec<String>> =
            sample.iter().enumerate().map(|(i, v)| vec![name.clone(), format!("{name} metro area {}", i + 1), v.to_string()]).collect();
        rows.push(vec![name.clone(), format!("{name} nonmetropolitan area"), balance.to_string()]);
        write_csv(&data.join(format!("{}.csv", table_id(state))), &["state", "metropolitan_area", "num_of_reports"], &rows)?;
    }
    store.db().ingest_dataset(&data, DATASET)?;
    Ok(())
}

fn top_k(store: &Store) -> anyhow::Result<Vec<String>> {
    store.engine.retriever.build_index(DATASET)?;
    let mut rq = RetrievalQuery::new(QUERY, 10);
    rq.extracted_entities = entities();
    let r = store.engine.retriever.fused_retrieve(&mut rq, &[DATASET.to_string()])?;
    Ok(r.table_ids().into_iter().map(String::from).collect())
}

fn plan(analysis: &str, actions: serde_json::Value) -> ScriptedReply {
    ScriptedReply::json(json!({"analysis": analysis, "actions": actions}))
}

fn direct_trace(retrieved: &[String]) -> Trace {
    let union: Vec<String> = retrieved.iter().map(|t| format!("SELECT num_of_reports FROM {t}")).collect();
    let sql = format!("SELECT sum(num_of_reports) AS answer FROM ({})", union.join(" UNION ALL "));
    Trace {
        dataset: Some(DATASET.into()),
        messages: vec![QUESTION.into()],
        replies: vec![
            plan("find the report tables", json!([{"kind": "retrieve", "queries": [{"text": QUERY, "entities": entities()}], "k": 10}])),
            plan(
                "sum what was retrieved",
                json!([
                    {"kind": "executor", "transformation": {"kind": "sql", "body": sql}},
                    {"kind": "user_communicate", "communication": "answer", "text": "Total identity theft reports:"}
                ]),
            )
            .expecting(retrieved.join(", ")),
            ScriptedReply::text("The retrieved tables report the total shown."),
        ],
        direct_synthesis: true,
        ..Default::default()
    }
}

fn modeled_trace() -> Trace {
    let view = json!({"view_id": "identity_theft_msa_reports", "columns": [
        {"name": "state", "declared_type": "text", "description": "US state or territory"},
        {"name": "metropolitan_area", "declared_type": "text", "description": "metropolitan statistical area"},
        {"name": "num_of_reports", "declared_type": "integer", "description": "identity theft reports"}
    ]});
    Trace {
        dataset: Some(DATASET.into()),
        messages: vec![QUESTION.into()],
        replies: vec![
            plan(
                "one table per state: enumerate the family and union it",
                json!([
                    {"kind": "enumerate", "pattern": PATTERN},
                    {"kind": "model_update", "add_views": [view],
                     "transformation": {"kind": "sql", "body": "SELECT sum(num_of_reports) AS answer FROM identity_theft_msa_reports",
                                        "declared_inputs": ["identity_theft_msa_reports"]}},
                    {"kind": "materialize", "guidance": "union every per-state table"}
                ]),
            )
            .expecting(QUESTION),
            plan("union the family", json!([{"kind": "union", "pattern": PATTERN, "output": "identity_theft_msa_reports"}])),
            plan("ready", json!([{"kind": "executor"}, {"kind": "user_communicate", "communication": "answer", "text": "Total identity theft reports:"}]))
                .expecting("identity_theft_msa_reports [materialized"),
            ScriptedReply::text("All 52 state tables together give the total shown."),
        ],
        ..Default::default()
    }
}

pub fn check(ctx: &mut Ctx) -> anyhow::Result<Outcome> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let mut fixture: Fixture = STATES.iter().map(|s| (table_id(s), ((0..5).map(|_| rng.gen_range(50..400)).collect(), 0))).collect();

    // retrieval only sees the first five rows, so the top 10 can be found
    // before the balancing rows are chosen
    let probe = Store::new()?;
    write(&probe, &fixture)?;
    let retrieved = top_k(&probe)?;
    drop(probe);

    let in_r = |t: &String| retrieved.contains(t);
    for (share_of, target) in [(true, UNDERCOUNT), (false, TOTAL - UNDERCOUNT)] {
        let ids: Vec<String> = fixture.keys().filter(|t| in_r(t) == share_of).cloned().collect();
        let base: i64 = ids.iter().map(|t| fixture[t].0.iter().sum::<i64>()).sum();
        let rest = target - base;
        anyhow::ensure!(rest >= 0, "sampled rows already exceed the planted total");
        let each = rest / ids.len() as i64;
        for (i, t) in ids.iter().enumerate() {
            fixture.get_mut(t).expect("table").1 = each + if i == 0 { rest % ids.len() as i64 } else { 0 };
        }
    }
    let oracle_total: i64 = fixture.values().map(|(s, b)| s.iter().sum::<i64>() + b).sum();
    let oracle_r: i64 = fixture.iter().filter(|(t, _)| in_r(t)).map(|(_, (s, b))| s.iter().sum::<i64>() + b).sum();

    let store = Store::new()?;
    write(&store, &fixture)?;
    let same_r = top_k(&store)? == retrieved;

    let modeled = play(&store, &modeled_trace(), PlannerConfig::default())?;
    ctx.record_replay("reification (T,S)", &modeled);
    let direct = play(&store, &direct_trace(&retrieved), PlannerConfig::default())?;
    ctx.record_replay("reification direct", &direct);

    let got_total = scalar(&modeled).and_then(|v| v.as_i64());
    let got_direct = scalar(&direct).and_then(|v| v.as_i64());
    let elapsed = started.elapsed();
    let pass = oracle_total == TOTAL
        && oracle_r == UNDERCOUNT
        && same_r
        && got_total == Some(TOTAL)
        && got_direct == Some(UNDERCOUNT)
        && elapsed < LIMIT;
    let show = |v: Option<i64>| v.map_or("none".to_string(), |v| v.to_string());
    Ok(Outcome::new(
        pass,
        format!(
            "{} tables; enumerate+union path {} (want {TOTAL}), direct over top-10 {} (want {UNDERCOUNT}); retrieval stable across stores: {same_r}; {:.2}s < {}s",
            STATES.len(),
            show(got_total),
            show(got_direct),
            elapsed.as_secs_f64(),
            LIMIT.as_secs()
        ),
    ))
}
