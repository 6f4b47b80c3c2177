//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Runs without the libtest harness so the PASS/FAIL lines always reach the
//! console. The process exits non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use dcmon_core::collector::{Address, Collector, CollectorEndpoint, GeneratorSpec, Level, Pattern};
use dcmon_core::openmetrics::{
    parse_exposition, serialize_exposition, Exposition, LabelSet, MetricFamily, MetricType, Sample,
    Timestamp, CONTENT_TYPE,
};
use dcmon_core::processor::{AggFn, AggregationSpec, Processor, ProcessorConfig};
use dcmon_core::reader::{handle_request, route, Route, RouteError, API_PREFIX};
use dcmon_core::reduction::{reconstruct_series, Reducer, ReductionConfig, SamplingConfig};
use dcmon_core::scenario::{run_scenario, run_scenario_logged, RunReport, ScenarioSpec};
use dcmon_core::store::{
    MetricsStore, Scope, SeriesKey, StoreConfig, StoredPoint, DEFAULT_CRUCIAL_FAMILIES,
};
use dcmon_core::topic::{topic_match, Topic, TopicFilter};
use dcmon_core::transport::Broker;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn load(name: &str) -> ScenarioSpec {
    ScenarioSpec::load(&scenario_dir().join(name)).unwrap()
}

fn failed_assertions(r: &RunReport) -> Vec<String> {
    r.assertions
        .iter()
        .filter(|a| !a.passed)
        .map(|a| format!("{}: {}", a.name, a.detail))
        .collect()
}

fn codec_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DEC);
    let mut corpus = Vec::new();
    for i in 0..1000 {
        let e = random_exposition(&mut rng);
        let text =
            serialize_exposition(&e).map_err(|err| format!("#{i}: serialize failed: {err}"))?;
        ensure!(
            grammar_ok(&text),
            "#{i}: grammar oracle rejects serializer output:\n{text}"
        );
        let back = parse_exposition(&text).map_err(|err| format!("#{i}: {err}\n{text}"))?;
        ensure!(
            back == e,
            "#{i}: round trip changed the exposition:\n{text}"
        );
        ensure!(
            serialize_exposition(&back).unwrap() == text,
            "#{i}: serialize not idempotent"
        );
        corpus.push(text);
    }
    let mut breaking = 0;
    let mut attempts = 0;
    while breaking < 500 {
        attempts += 1;
        ensure!(
            attempts < 200_000,
            "could not find 500 grammar-breaking mutations"
        );
        let text = corpus.choose(&mut rng).unwrap();
        let Some(m) = mutate_byte(text, &mut rng) else {
            continue;
        };
        if grammar_ok(&m) {
            continue;
        }
        breaking += 1;
        ensure!(
            parse_exposition(&m).is_err(),
            "accepted a grammar-breaking mutation:\n{m:?}\noriginal:\n{text:?}"
        );
    }
    Ok(format!("1000 random expositions round-trip; {breaking} grammar-breaking mutations rejected ({attempts} tried)"))
}

fn collector_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC011);
    let mut served_total = 0;
    for run in 0..100 {
        let mut gens = Vec::new();
        for g in 0..rng.random_range(1..=5) {
            let (mtype, pattern) = match rng.random_range(0..4) {
                0 => (
                    MetricType::Gauge,
                    Pattern::Constant {
                        value: rng.random_range(0.0..10.0),
                    },
                ),
                1 => (
                    MetricType::Gauge,
                    Pattern::RandomWalk {
                        start: 5.0,
                        step_stddev: 1.0,
                        min: 0.0,
                        max: 10.0,
                    },
                ),
                2 => (
                    MetricType::Gauge,
                    Pattern::Sine {
                        mean: 0.0,
                        amplitude: 3.0,
                        period_s: 60.0,
                    },
                ),
                _ => (
                    MetricType::Counter,
                    Pattern::CounterRate {
                        rate_per_s: rng.random_range(0.0..100.0),
                    },
                ),
            };
            gens.push(GeneratorSpec {
                family: format!("fam{g}"),
                mtype,
                labels: LabelSet::from_pairs([("k", run.to_string())]).unwrap(),
                pattern,
                seed: rng.random(),
            });
        }
        let mut c = Collector::new(CollectorEndpoint {
            level: Level::Machine,
            address: Address::InProcess("m".into()),
            generators: gens,
        })
        .unwrap();
        let mut generated: Vec<(String, String, Timestamp, u64)> = Vec::new();
        let mut served: Vec<(String, String, Timestamp, u64)> = Vec::new();
        let flatten = |e: &Exposition, out: &mut Vec<(String, String, Timestamp, u64)>| {
            for (f, s) in e.samples() {
                out.push((
                    f.name.clone(),
                    s.suffix.clone(),
                    s.timestamp.unwrap(),
                    s.value.to_bits(),
                ));
            }
        };
        let mut now = 0;
        for _ in 0..rng.random_range(1..200) {
            if rng.random_bool(0.6) {
                now += rng.random_range(1..20_000);
                flatten(&c.generate_tick(now).unwrap(), &mut generated);
            } else {
                flatten(&parse_exposition(&c.serve_metrics()).unwrap(), &mut served);
            }
        }
        flatten(&parse_exposition(&c.serve_metrics()).unwrap(), &mut served);
        ensure!(
            c.dropped_total() == 0,
            "run {run}: collector dropped samples"
        );
        let distinct: BTreeSet<_> = served.iter().collect();
        ensure!(
            distinct.len() == served.len(),
            "run {run}: a sample was served twice"
        );
        generated.sort();
        served.sort();
        ensure!(
            generated == served,
            "run {run}: served {} of {} generated samples",
            served.len(),
            generated.len()
        );
        served_total += served.len();
    }
    Ok(format!(
        "100 random tick/scrape schedules, {served_total} samples each served exactly once"
    ))
}

fn lossy_baseline() -> Outcome {
    let spec = load("baseline_lossy.toml");
    let nodes = spec.nodes();
    let dcs: BTreeSet<&str> = nodes.iter().map(|n| n.dc.as_str()).collect();
    let ticks = spec.duration_ms.div_ceil(spec.timing.tick_period_ms);
    ensure!(
        nodes.len() == 10 && dcs.len() == 2,
        "topology is {} nodes in {} dcs",
        nodes.len(),
        dcs.len()
    );
    ensure!(
        ticks == 100 && spec.generators.len() == 5,
        "{ticks} ticks of {} families",
        spec.generators.len()
    );
    ensure!(
        spec.net.drop_prob == 0.0
            && spec.agent.sampling_delta.is_none()
            && spec.agent.dedup != Some(true),
        "drops or reduction enabled"
    );
    let r = run_scenario(&spec).map_err(|e| e.to_string())?;
    ensure!(
        r.node_machine_samples == 10 * 100 * 5,
        "node-scope machine samples {}",
        r.node_machine_samples
    );
    ensure!(r.lost_total() == 0, "lost {}", r.lost_total());
    ensure!(
        r.conservation_holds() && r.unexpected_stored == 0,
        "conservation broken"
    );
    ensure!(
        failed_assertions(&r).is_empty(),
        "{:?}",
        failed_assertions(&r)
    );
    Ok(format!(
        "{} node-scope samples stored, 0 lost",
        r.node_machine_samples
    ))
}

fn lossy_persist_failure() -> Outcome {
    let r = run_scenario(&load("persist_failure_lossy.toml")).map_err(|e| e.to_string())?;
    ensure!(
        r.failed_batches.len() == 1,
        "{} failed batches",
        r.failed_batches.len()
    );
    let batch = &r.failed_batches[0];
    ensure!(batch.samples > 0, "failed batch carried no samples");
    ensure!(
        r.lost_total() == batch.samples,
        "lost {} but the failed batch held {}",
        r.lost_total(),
        batch.samples
    );
    ensure!(
        r.lost_by_cause
            .keys()
            .all(|c| c == "in_flight_at_persist_failure"),
        "other loss causes: {:?}",
        r.lost_by_cause
    );
    ensure!(
        r.conservation_holds() && r.unexpected_stored == 0,
        "conservation broken"
    );
    Ok(format!(
        "lost {} = samples of failed batch {} from {}",
        r.lost_total(),
        batch.batch_seq,
        batch.node
    ))
}

fn acked_persist_failure() -> Outcome {
    let r = run_scenario(&load("persist_failure_acked.toml")).map_err(|e| e.to_string())?;
    ensure!(
        r.failed_batches.len() == 1,
        "{} failed batches",
        r.failed_batches.len()
    );
    let failed = r.failed_batches[0].samples;
    ensure!(r.lost_total() == 0, "lost {}", r.lost_total());
    ensure!(
        r.generated.iter().all(|(n, g)| r.stored.get(n) == Some(g)),
        "stored differs from generated per node"
    );
    ensure!(
        r.node_machine_samples == r.generated_total(),
        "store holds {} node samples for {} generated",
        r.node_machine_samples,
        r.generated_total()
    );
    ensure!(
        r.conservation_holds() && r.unexpected_stored == 0,
        "conservation broken"
    );
    Ok(format!(
        "failed batch of {failed} resent, 0 lost, {} stored exactly once",
        r.stored_total()
    ))
}

const CRASH_TEMPLATE: &str = r#"
seed = {seed}
duration_ms = 320000
[timing]
health_period_ms = 10000
ping_deadline_ms = 3000
health_offset_ms = {offset}
[net]
latency_min_ms = 1
latency_max_ms = {lat}
drop_prob = 0.0
[[generators]]
family = "machine_cpu_cores"
type = "gauge"
pattern = { kind = "constant", value = 4.0 }
[[dcs]]
id = "a"
node_count = 3
[[dcs]]
id = "b"
node_count = 3
[[faults]]
kind = "node_crash"
node = "{node}"
at_ms = {at}
"#;

fn dead_detection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xDEAD);
    let mut worst = 0;
    for run in 0..50 {
        let at: u64 = rng.random_range(20_000..300_000);
        let node = *["a-n1", "a-n2", "a-n3", "b-n1", "b-n2", "b-n3"]
            .choose(&mut rng)
            .unwrap();
        let text = CRASH_TEMPLATE
            .replace("{seed}", &rng.random::<u32>().to_string())
            .replace("{offset}", &rng.random_range(0..10_000).to_string())
            .replace("{lat}", &rng.random_range(1..200).to_string())
            .replace("{node}", node)
            .replace("{at}", &at.to_string());
        let r =
            run_scenario(&ScenarioSpec::from_toml(&text).unwrap()).map_err(|e| e.to_string())?;
        let at = at as Timestamp;
        let [(dead, when)] = r.dead_transitions.as_slice() else {
            return Err(format!(
                "run {run}: expected one dead transition, got {:?}",
                r.dead_transitions
            ));
        };
        ensure!(
            dead == node,
            "run {run}: {dead} declared dead but {node} crashed"
        );
        ensure!(
            *when >= at && *when <= at + 13_000,
            "run {run}: crash at {at} detected at {when}"
        );
        worst = worst.max(when - at);
    }
    Ok(format!(
        "50 crashes detected within {worst} ms (bound 13000), no false positives"
    ))
}

fn aggregation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA66);
    let mut compared = 0;
    for topo in 0..200 {
        let store = Arc::new(MetricsStore::in_memory(StoreConfig {
            sync_writes: false,
            ..StoreConfig::default()
        }));
        let mut p = Processor::new(ProcessorConfig::default(), Arc::clone(&store)).unwrap();
        let dc_count = rng.random_range(1..=3);
        let node_count = rng.random_range(1..=10);
        let families: Vec<String> = (0..rng.random_range(1..=5))
            .map(|i| format!("f{i}"))
            .collect();
        let now: Timestamp = 1_000_000;
        let mut nodes = Vec::new();
        for i in 0..node_count {
            let id = format!("n{i}");
            let dc = format!("d{}", rng.random_range(0..dc_count));
            p.register_node(&id, &dc, None, 0).unwrap();
            nodes.push((id, dc));
        }
        let mut oracle_points = Vec::new();
        let mut stored = Vec::new();
        for (id, _) in &nodes {
            for fam in &families {
                for series in 0..rng.random_range(0..3u32) {
                    let suffix = *["", "", "_total", "_created"].choose(&mut rng).unwrap();
                    let labels =
                        LabelSet::from_pairs([("node", id.as_str()), ("s", &series.to_string())])
                            .unwrap();
                    for _ in 0..rng.random_range(1..4) {
                        let timestamp = rng.random_range(0..=now);
                        let value = rng.random_range(-50.0..100.0);
                        stored.push(StoredPoint {
                            key: SeriesKey {
                                scope: Scope::Node,
                                scope_id: id.clone(),
                                family: fam.clone(),
                                suffix: suffix.to_string(),
                                labels: labels.clone(),
                            },
                            timestamp,
                            value,
                            mtype: if suffix.is_empty() {
                                MetricType::Gauge
                            } else {
                                MetricType::Counter
                            },
                        });
                    }
                }
            }
        }
        // the store keeps the first point of a duplicate (series, timestamp)
        let mut seen = BTreeSet::new();
        for sp in &stored {
            if seen.insert((sp.key.clone(), sp.timestamp)) {
                oracle_points.push(OraclePoint {
                    node: sp.key.scope_id.clone(),
                    family: sp.key.family.clone(),
                    suffix: sp.key.suffix.clone(),
                    series: sp.key.labels.get("s").unwrap().parse().unwrap(),
                    timestamp: sp.timestamp,
                    value: sp.value,
                });
            }
        }
        store.append(&stored).unwrap();
        p.begin_round(now);
        let replied: BTreeSet<String> = nodes
            .iter()
            .filter(|_| rng.random_bool(0.75))
            .map(|(id, _)| id.clone())
            .collect();
        p.finish_round(now, &replied);
        let specs: Vec<AggregationSpec> = families
            .iter()
            .map(|f| {
                AggregationSpec::new(
                    f,
                    *[AggFn::Sum, AggFn::Avg].choose(&mut rng).unwrap(),
                    Duration::from_millis(rng.random_range(1..=1_200_000)),
                )
            })
            .collect();
        for dc in (0..dc_count).map(|d| format!("d{d}")) {
            let alive: BTreeSet<String> = nodes
                .iter()
                .filter(|(id, d)| *d == dc && replied.contains(id))
                .map(|(id, _)| id.clone())
                .collect();
            let got = p.aggregate_dc(&dc, &specs, now);
            for spec in &specs {
                let oldest = now - spec.staleness_window.as_millis() as Timestamp;
                let want = oracle_aggregate(
                    &oracle_points,
                    &alive,
                    &spec.family,
                    spec.function == AggFn::Avg,
                    oldest,
                );
                let have = got.family(&spec.family).map(|f| f.samples[0].value);
                let ok = match (have, want) {
                    (None, None) => true,
                    (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
                    _ => false,
                };
                ensure!(
                    ok,
                    "topology {topo}, dc {dc}, {}: got {have:?}, oracle {want:?}",
                    spec.family
                );
                compared += 1;
            }
        }
    }
    Ok(format!(
        "200 topologies, {compared} aggregates match the brute-force oracle within 1e-9"
    ))
}

fn wildcard_equivalence() -> Outcome {
    let ids = ["a", "b", "c"];
    let kinds = ["nodes", "dc"];
    let topics: Vec<String> = kinds
        .iter()
        .flat_map(|k| ids.iter().map(move |i| format!("metrics.{k}.{i}")))
        .collect();
    let mut filters = Vec::new();
    for k in kinds.iter().chain(&["*"]) {
        for i in ids.iter().chain(&["*"]) {
            filters.push(format!("metrics.{k}.{i}"));
        }
    }
    let mut cases = 0;
    let mut broker = Broker::new();
    let mut subs = Vec::new();
    for f in &filters {
        let filter: TopicFilter = f.parse().map_err(|e| format!("{f}: {e}"))?;
        let expected: BTreeSet<&String> = topics.iter().filter(|t| segment_match(f, t)).collect();
        let expanded: BTreeSet<String> =
            filter.expand(&ids).iter().map(|t| t.to_string()).collect();
        ensure!(
            expanded.iter().collect::<BTreeSet<_>>() == expected,
            "expand({f}) = {expanded:?}"
        );
        for t in &topics {
            let topic: Topic = t.parse().unwrap();
            ensure!(
                topic_match(&filter, &topic) == segment_match(f, t),
                "topic_match({f}, {t}) disagrees with the oracle"
            );
            cases += 1;
        }
        subs.push((f.clone(), broker.subscribe(filter).1));
    }
    for t in &topics {
        broker.publish(&t.parse().unwrap(), t.as_bytes(), |_| true);
    }
    for (f, rx) in &subs {
        let got: Vec<String> = rx.try_iter().map(|(t, _)| t.to_string()).collect();
        let want: Vec<String> = topics
            .iter()
            .filter(|t| segment_match(f, t))
            .cloned()
            .collect();
        ensure!(got == want, "subscriber {f} received {got:?}");
    }
    for bad in [
        "metrics.nodes",
        "metrics.nodes.a.b",
        "metrics.**.a",
        "metrics.nodes.a*",
        "metric.nodes.a",
        "metrics.vms.a",
        "metrics.nodes.",
    ] {
        ensure!(bad.parse::<TopicFilter>().is_err(), "accepted filter {bad}");
    }
    Ok(format!(
        "{} filters x {} topics = {cases} cases agree with the set oracle, broker deliveries match",
        filters.len(),
        topics.len()
    ))
}

fn scope_label(scope: Scope) -> &'static str {
    match scope {
        Scope::Node => "node",
        Scope::Dc => "dc",
        Scope::Container => "container",
        Scope::App => "app",
    }
}

type Row = (String, String, LabelSet, Timestamp, u64);

fn rows(e: &Exposition) -> Vec<Row> {
    let mut v: Vec<Row> = e
        .samples()
        .map(|(f, s)| {
            (
                f.name.clone(),
                s.suffix.clone(),
                s.labels.clone(),
                s.timestamp.unwrap(),
                s.value.to_bits(),
            )
        })
        .collect();
    v.sort();
    v
}

fn point_rows<'a>(points: impl Iterator<Item = &'a StoredPoint>) -> Vec<Row> {
    let mut v: Vec<Row> = points
        .map(|p| {
            (
                p.key.family.clone(),
                p.key.suffix.clone(),
                p.key.labels.clone(),
                p.timestamp,
                p.value.to_bits(),
            )
        })
        .collect();
    v.sort();
    v
}

fn rest_contract() -> Outcome {
    let n = |id: &str| id.to_string();
    let table: Vec<(&str, Result<Route, RouteError>)> = vec![
        (
            "/nodes/n1/1700",
            Ok(Route::Since {
                scope: Scope::Node,
                id: n("n1"),
                since: 1700,
            }),
        ),
        (
            "/nodes/n1/1000/2000",
            Ok(Route::Range {
                scope: Scope::Node,
                id: n("n1"),
                start: 1000,
                end: 2000,
            }),
        ),
        (
            "/dc/d1/5",
            Ok(Route::Since {
                scope: Scope::Dc,
                id: n("d1"),
                since: 5,
            }),
        ),
        (
            "/dc/d1/5/6",
            Ok(Route::Range {
                scope: Scope::Dc,
                id: n("d1"),
                start: 5,
                end: 6,
            }),
        ),
        (
            "/containers/c1/7",
            Ok(Route::Since {
                scope: Scope::Container,
                id: n("c1"),
                since: 7,
            }),
        ),
        (
            "/containers/c1/7/9",
            Ok(Route::Range {
                scope: Scope::Container,
                id: n("c1"),
                start: 7,
                end: 9,
            }),
        ),
        (
            "/apps/a1/0",
            Ok(Route::Since {
                scope: Scope::App,
                id: n("a1"),
                since: 0,
            }),
        ),
        (
            "/apps/a1/0/10",
            Ok(Route::Range {
                scope: Scope::App,
                id: n("a1"),
                start: 0,
                end: 10,
            }),
        ),
        (
            "/1700000000000",
            Ok(Route::AllSince {
                since: 1_700_000_000_000,
            }),
        ),
        ("/1/2", Ok(Route::AllRange { start: 1, end: 2 })),
        (
            "/nodes/n1/latest",
            Ok(Route::Latest {
                scope: Scope::Node,
                id: n("n1"),
            }),
        ),
        (
            "/dc/d1/latest",
            Ok(Route::Latest {
                scope: Scope::Dc,
                id: n("d1"),
            }),
        ),
        (
            "/nodes/n1/1700000000000",
            Ok(Route::Since {
                scope: Scope::Node,
                id: n("n1"),
                since: 1_700_000_000_000,
            }),
        ),
        (
            "/nodes/latest/latest",
            Ok(Route::Latest {
                scope: Scope::Node,
                id: n("latest"),
            }),
        ),
        (
            "/dc/latest/3",
            Ok(Route::Since {
                scope: Scope::Dc,
                id: n("latest"),
                since: 3,
            }),
        ),
        (
            "/nodes/1/2",
            Ok(Route::Since {
                scope: Scope::Node,
                id: n("1"),
                since: 2,
            }),
        ),
        ("/nodes/n1/2/1", Err(RouteError::BadRequest(String::new()))),
        ("/nodes/n1/soon", Err(RouteError::BadRequest(String::new()))),
        (
            "/containers/c1/latest",
            Err(RouteError::BadRequest(String::new())),
        ),
        ("/latest", Err(RouteError::NotFound)),
        ("/vms/x/1", Err(RouteError::NotFound)),
        ("/nodes/n1", Err(RouteError::NotFound)),
        ("/nodes/n1/1/2/3", Err(RouteError::NotFound)),
    ];
    for (path, want) in &table {
        let got = route(&format!("{API_PREFIX}{path}"));
        let ok = match (&got, want) {
            (Err(RouteError::BadRequest(_)), Err(RouteError::BadRequest(_))) => true,
            _ => got == *want,
        };
        ensure!(ok, "{path}: routed to {got:?}, expected {want:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x7AB1E);
    let families: Vec<(String, MetricType)> = DEFAULT_CRUCIAL_FAMILIES
        .iter()
        .map(|f| (f.to_string(), MetricType::Gauge))
        .chain([
            ("http_requests".to_string(), MetricType::Counter),
            ("queue_depth".to_string(), MetricType::Gauge),
        ])
        .collect();
    let ids = ["x", "y", "z"];
    let mut queries = 0;
    for _store in 0..10 {
        let store = MetricsStore::in_memory(StoreConfig {
            sync_writes: false,
            ..StoreConfig::default()
        });
        let mut points = Vec::new();
        let mut seen = BTreeSet::new();
        while points.len() < 1000 {
            let scope = *Scope::ALL.choose(&mut rng).unwrap();
            let id = *ids.choose(&mut rng).unwrap();
            let (family, mtype) = families.choose(&mut rng).unwrap().clone();
            let labels = LabelSet::from_pairs([
                (scope_label(scope), id),
                ("s", if rng.random_bool(0.5) { "p" } else { "q" }),
            ])
            .unwrap();
            let key = SeriesKey {
                scope,
                scope_id: id.to_string(),
                family,
                suffix: if mtype == MetricType::Counter {
                    "_total".into()
                } else {
                    String::new()
                },
                labels,
            };
            let timestamp = rng.random_range(0..10_000);
            if seen.insert((key.clone(), timestamp)) {
                points.push(StoredPoint {
                    key,
                    timestamp,
                    value: rng.random_range(0.0..1000.0),
                    mtype,
                });
            }
        }
        store.append(&points).unwrap();
        for _ in 0..40 {
            let scope = *Scope::ALL.choose(&mut rng).unwrap();
            let seg = match scope {
                Scope::Node => "nodes",
                Scope::Dc => "dc",
                Scope::Container => "containers",
                Scope::App => "apps",
            };
            let id = *ids.choose(&mut rng).unwrap();
            let a = rng.random_range(-100..10_100);
            let b = rng.random_range(a..10_200);
            let now = rng.random_range(0..10_100);
            let in_scope = |p: &&StoredPoint| p.key.scope == scope && p.key.scope_id == id;
            let cases: Vec<(String, Vec<Row>)> = vec![
                (
                    format!("/{seg}/{id}/{a}/{b}"),
                    point_rows(
                        points
                            .iter()
                            .filter(in_scope)
                            .filter(|p| p.timestamp >= a && p.timestamp < b),
                    ),
                ),
                (
                    format!("/{seg}/{id}/{a}"),
                    point_rows(
                        points
                            .iter()
                            .filter(in_scope)
                            .filter(|p| p.timestamp >= a && p.timestamp <= now),
                    ),
                ),
                (
                    format!("/{a}/{b}"),
                    point_rows(
                        points
                            .iter()
                            .filter(|p| p.timestamp >= a && p.timestamp < b),
                    ),
                ),
                (
                    format!("/{a}"),
                    point_rows(
                        points
                            .iter()
                            .filter(|p| p.timestamp >= a && p.timestamp <= now),
                    ),
                ),
            ];
            let mut cases = cases;
            if matches!(scope, Scope::Node | Scope::Dc) {
                let mut latest: BTreeMap<&SeriesKey, &StoredPoint> = BTreeMap::new();
                for p in points
                    .iter()
                    .filter(in_scope)
                    .filter(|p| DEFAULT_CRUCIAL_FAMILIES.contains(&p.key.family.as_str()))
                {
                    let e = latest.entry(&p.key).or_insert(p);
                    if p.timestamp > e.timestamp {
                        *e = p;
                    }
                }
                cases.push((
                    format!("/{seg}/{id}/latest"),
                    point_rows(latest.into_values()),
                ));
            }
            for (path, want) in cases {
                let path = if a < 0 && !path.ends_with("latest") {
                    continue;
                } else {
                    path
                };
                let resp = handle_request(&store, "GET", &format!("{API_PREFIX}{path}"), now);
                ensure!(
                    resp.status == 200 && resp.content_type == CONTENT_TYPE,
                    "{path}: status {} {}",
                    resp.status,
                    resp.body
                );
                let body = parse_exposition(&resp.body)
                    .map_err(|e| format!("{path}: body does not parse: {e}"))?;
                ensure!(
                    rows(&body) == want,
                    "{path}: {} samples, linear scan has {}",
                    body.sample_count(),
                    want.len()
                );
                queries += 1;
            }
        }
    }
    Ok(format!("{} route cases dispatch as expected; {queries} queries on 1000-point stores match a linear scan and re-parse", table.len()))
}

fn reduction_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x2ED);
    let mut summary = Vec::new();
    for delta in [0.1, 0.5, 1.0, 2.5] {
        let cfg = SamplingConfig {
            delta,
            heartbeat_max: Duration::from_secs(60),
        };
        let mut reducer = Reducer::new(ReductionConfig {
            dedup_enabled: false,
            sampling: Some(cfg),
        });
        let step = Normal::new(0.0, 0.4).unwrap();
        let mut value: f64 = 50.0;
        let mut original = Vec::with_capacity(10_000);
        let mut kept = Vec::new();
        for i in 0..10_000i64 {
            value += step.sample(&mut rng);
            let ts = i * 5_000;
            let s = Sample::new(LabelSet::new(), value, ts);
            original.push(s.clone());
            let e = Exposition {
                families: vec![MetricFamily::new("walk", MetricType::Gauge).with_sample(s)],
            };
            let reduced = reducer.apply(e);
            kept.extend(reduced.kept.samples().map(|(_, s)| s.clone()));
        }
        let at: Vec<Timestamp> = original.iter().map(|s| s.timestamp.unwrap()).collect();
        let rebuilt = reconstruct_series(&kept, &at).map_err(|e| e.to_string())?;
        let worst = original
            .iter()
            .zip(&rebuilt)
            .map(|(o, r)| (o.value - r.value).abs())
            .fold(0.0, f64::max);
        ensure!(
            worst <= delta,
            "delta {delta}: reconstruction error {worst}"
        );
        ensure!(
            kept.len() < original.len(),
            "delta {delta}: kept every point"
        );
        summary.push(format!("d={delta}: kept {} max err {worst:.3}", kept.len()));
    }
    Ok(format!("10000-point walks, {}", summary.join("; ")))
}

fn determinism() -> Outcome {
    let files = scenario_files();
    ensure!(!files.is_empty(), "no scenario files");
    for path in &files {
        let spec = ScenarioSpec::load(path).unwrap();
        let (a, la) = run_scenario_logged(&spec).map_err(|e| e.to_string())?;
        let (b, lb) = run_scenario_logged(&spec).map_err(|e| e.to_string())?;
        ensure!(la == lb, "{}: event logs differ", spec.name);
        ensure!(
            a.event_log_digest == b.event_log_digest,
            "{}: digests differ",
            spec.name
        );
        ensure!(a.to_csv() == b.to_csv(), "{}: reports differ", spec.name);
    }
    Ok(format!(
        "{} scenarios replay to identical event logs and digests",
        files.len()
    ))
}

const WAL_WRITER_ENV: &str = "DCMON_ACCEPTANCE_WAL_WRITER";

fn durable_point(i: i64) -> StoredPoint {
    StoredPoint {
        key: SeriesKey {
            scope: Scope::Node,
            scope_id: "n1".into(),
            family: "machine_cpu_cores".into(),
            suffix: String::new(),
            labels: LabelSet::from_pairs([("node", "n1")]).unwrap(),
        },
        timestamp: i,
        value: i as f64 / 4.0,
        mtype: MetricType::Gauge,
    }
}

/// Child process: appends forever, reporting each acknowledged point.
fn wal_writer(dir: &str) -> ! {
    use std::io::Write;
    let store = MetricsStore::open(std::path::Path::new(dir), StoreConfig::default()).unwrap();
    let mut out = std::io::stdout().lock();
    for i in 0.. {
        store.append(&[durable_point(i)]).unwrap();
        writeln!(out, "{i}").unwrap();
        out.flush().unwrap();
    }
    unreachable!()
}

fn durability() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut child = Command::new(std::env::current_exe().unwrap())
        .env(WAL_WRITER_ENV, dir.path())
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut acked = Vec::new();
    for line in BufReader::new(child.stdout.take().unwrap()).lines() {
        acked.push(line.map_err(|e| e.to_string())?.parse::<i64>().unwrap());
        if acked.len() == 300 {
            child.kill().map_err(|e| e.to_string())?;
            break;
        }
    }
    let _ = child.wait();
    ensure!(
        acked.len() == 300,
        "writer acknowledged only {} points",
        acked.len()
    );

    let check = |store: &MetricsStore| -> Result<usize, String> {
        let got = store
            .query_range(Scope::Node, "n1", 0, i64::MAX)
            .map_err(|e| e.to_string())?;
        let have: BTreeSet<Timestamp> = got.samples().map(|(_, s)| s.timestamp.unwrap()).collect();
        for i in &acked {
            ensure!(
                have.contains(i),
                "acknowledged point {i} missing after restart"
            );
        }
        Ok(have.len())
    };
    let store =
        MetricsStore::open(dir.path(), StoreConfig::default()).map_err(|e| e.to_string())?;
    let after_kill = check(&store)?;
    drop(store);

    // a write torn by the kill leaves a partial record at the tail
    let wal = dir.path().join(dcmon_core::store::WAL_FILE);
    let mut bytes = std::fs::read(&wal).unwrap();
    bytes.extend_from_slice(&[0, 0, 1, 0, b'[', b'{']);
    std::fs::write(&wal, bytes).unwrap();
    let store =
        MetricsStore::open(dir.path(), StoreConfig::default()).map_err(|e| e.to_string())?;
    check(&store)?;
    store
        .append(&[durable_point(1_000_000)])
        .map_err(|e| e.to_string())?;
    drop(store);
    let store =
        MetricsStore::open(dir.path(), StoreConfig::default()).map_err(|e| e.to_string())?;
    let after_torn = check(&store)?;
    ensure!(
        after_torn == after_kill + 1,
        "append after torn-tail recovery was lost"
    );
    Ok(format!("writer killed after 300 acks; {after_kill} points replayed; torn tail truncated and log still appendable"))
}

fn main() {
    if let Ok(dir) = std::env::var(WAL_WRITER_ENV) {
        wal_writer(&dir);
    }
    let criteria: [Criterion; 12] = [
        ("codec round-trip and mutation rejection", codec_round_trip),
        (
            "collector serves every sample exactly once",
            collector_conservation,
        ),
        ("lossy piggyback delivery, no faults", lossy_baseline),
        (
            "lossy mode loses exactly the failed batch",
            lossy_persist_failure,
        ),
        (
            "acknowledged mode survives a failed persist",
            acked_persist_failure,
        ),
        ("dead-node detection bound", dead_detection),
        ("DC aggregation matches oracle", aggregation_oracle),
        (
            "wildcard matching equals set membership",
            wildcard_equivalence,
        ),
        ("REST routes and range queries", rest_contract),
        ("reduction error bound and savings", reduction_bound),
        ("scenario determinism", determinism),
        ("store durability across kill and restart", durability),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL  {:>2}. {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failures} failed",
        criteria.len() - failures
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
