//! Generators and reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::LazyLock;

use dcmon_core::openmetrics::{Exposition, LabelSet, MetricFamily, MetricType, Sample, Timestamp};
use rand::seq::IndexedRandom;
use rand::Rng;
use regex::Regex;

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn scenario_files() -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(scenario_dir())
        .expect("scenario directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    files
}

const NAME_HEAD: &[u8] = b"abcxyzABZ_:";
const NAME_TAIL: &[u8] = b"abcxyzABZ_:0189";
const LABEL_HEAD: &[u8] = b"abcxyzQ_";
const VALUE_CHARS: &[char] = &[
    'a', 'Z', '0', ' ', '\\', '"', '\n', '{', '}', ',', '=', '#', 'é', '☃', '.',
];

fn word(rng: &mut impl Rng, head: &[u8], tail: &[u8], max_tail: usize) -> String {
    let mut s = String::new();
    s.push(*head.choose(rng).unwrap() as char);
    for _ in 0..rng.random_range(0..=max_tail) {
        s.push(*tail.choose(rng).unwrap() as char);
    }
    s
}

fn random_labels(rng: &mut impl Rng) -> LabelSet {
    let mut set = LabelSet::new();
    for _ in 0..rng.random_range(0..4) {
        let name = word(rng, LABEL_HEAD, b"abc_19", 5);
        let value: String = (0..rng.random_range(0..6))
            .map(|_| *VALUE_CHARS.choose(rng).unwrap())
            .collect();
        let _ = set.insert(&name, value);
    }
    set
}

fn random_value(rng: &mut impl Rng, mtype: MetricType) -> f64 {
    let v = match rng.random_range(0..5) {
        0 => rng.random_range(-1000..1000) as f64,
        1 => rng.random_range(-1.0e-9..1.0e-9),
        2 => rng.random_range(-1.0e15..1.0e15),
        3 => 0.0,
        _ => rng.random_range(-10.0..10.0),
    };
    if mtype == MetricType::Counter {
        v.abs()
    } else {
        v
    }
}

/// A random exposition satisfying every codec invariant, in canonical form.
pub fn random_exposition(rng: &mut impl Rng) -> Exposition {
    let mut e = Exposition::new();
    let mut names = BTreeSet::new();
    for _ in 0..rng.random_range(0..5) {
        let mtype = *[MetricType::Gauge, MetricType::Counter, MetricType::Unknown]
            .choose(rng)
            .unwrap();
        let mut name = word(rng, NAME_HEAD, NAME_TAIL, 8);
        let unit = rng.random_bool(0.2).then(|| word(rng, b"bsm", b"a_z:", 3));
        if let Some(u) = &unit {
            name = format!("{name}_{u}");
        }
        if !names.insert(name.clone()) {
            continue;
        }
        let mut fam = MetricFamily::new(name, mtype);
        fam.unit = unit;
        if rng.random_bool(0.3) {
            let help: String = (0..rng.random_range(0..12))
                .map(|_| *[' ', 'h', '\\', '"', 'é', '#', '{'].choose(rng).unwrap())
                .collect();
            fam.help = Some(help);
        }
        let suffixes: &[&str] = match mtype {
            MetricType::Gauge => &[""],
            MetricType::Counter => &["_total", "_total", "_created", ""],
            MetricType::Unknown => &["", "_bucket", "_count", "_sum"],
        };
        let mut seen = BTreeSet::new();
        for _ in 0..rng.random_range(0..6) {
            let suffix = suffixes.choose(rng).unwrap().to_string();
            let labels = random_labels(rng);
            let timestamp = rng
                .random_bool(0.8)
                .then(|| rng.random_range(0..2_000_000_000_000i64));
            if !seen.insert((suffix.clone(), labels.clone(), timestamp)) {
                continue;
            }
            let value = random_value(rng, mtype);
            fam.samples.push(Sample {
                suffix,
                labels,
                value,
                timestamp,
            });
        }
        e.families.push(fam);
    }
    e
}

static LINE: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    let name = r"[a-zA-Z_:][a-zA-Z0-9_:]*";
    let label = r#"[a-zA-Z_][a-zA-Z0-9_]*="(?:[^"\\]|\\[\\"n])*""#;
    let value = r"(?:[+-]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?|[+-]?Inf|NaN)";
    let ts = r"[0-9]+(?:\.[0-9]+)?";
    [
        format!(r"^# TYPE {name} (?:gauge|counter|unknown|histogram|gaugehistogram|summary|stateset|info)$"),
        format!(r"^# HELP {name} .*$"),
        format!(r"^# UNIT {name} [a-zA-Z0-9_:]+$"),
        format!(r"^{name}(?:\{{{label}(?:,{label})*\}})? {value}(?: {ts})?$"),
    ]
    .iter()
    .map(|p| Regex::new(p).unwrap())
    .collect()
});

/// Line-level grammar of the text format, written independently of the
/// parser. Semantic rules (duplicates, units, counter signs) are ignored.
pub fn grammar_ok(text: &str) -> bool {
    let body = text.strip_suffix('\n').unwrap_or(text);
    let lines: Vec<&str> = body.split('\n').collect();
    let Some((last, rest)) = lines.split_last() else {
        return false;
    };
    *last == "# EOF" && rest.iter().all(|l| LINE.iter().any(|re| re.is_match(l)))
}

const MUTATION_BYTES: &[u8] = b" \n\"\\{}=,#.+-eE09aZ_:\t\x00~";

/// Replaces one ASCII byte of `text`, keeping the result valid UTF-8.
pub fn mutate_byte(text: &str, rng: &mut impl Rng) -> Option<String> {
    let bytes = text.as_bytes();
    let ascii: Vec<usize> = (0..bytes.len()).filter(|&i| bytes[i].is_ascii()).collect();
    let &pos = ascii.choose(rng)?;
    let b = *MUTATION_BYTES.choose(rng).unwrap();
    if b == bytes[pos] {
        return None;
    }
    let mut out = bytes.to_vec();
    out[pos] = b;
    String::from_utf8(out).ok()
}

/// A node's contribution to an aggregate: freshest point per series.
#[derive(Debug, Clone)]
pub struct OraclePoint {
    pub node: String,
    pub family: String,
    pub suffix: String,
    pub series: u32,
    pub timestamp: Timestamp,
    pub value: f64,
}

/// Brute force DC aggregation over a flat list of points.
pub fn oracle_aggregate(
    points: &[OraclePoint],
    alive: &BTreeSet<String>,
    family: &str,
    avg: bool,
    oldest: Timestamp,
) -> Option<f64> {
    let mut values = Vec::new();
    let series: BTreeSet<(&str, &str, u32)> = points
        .iter()
        .filter(|p| p.family == family)
        .map(|p| (p.node.as_str(), p.suffix.as_str(), p.series))
        .collect();
    for (node, suffix, id) in series {
        if !alive.contains(node) || !(suffix.is_empty() || suffix == "_total") {
            continue;
        }
        let latest = points
            .iter()
            .filter(|p| {
                p.node == node && p.family == family && p.suffix == suffix && p.series == id
            })
            .max_by_key(|p| p.timestamp)
            .unwrap();
        if latest.timestamp >= oldest {
            values.push(latest.value);
        }
    }
    if values.is_empty() {
        return None;
    }
    let sum: f64 = values.iter().sum();
    Some(if avg { sum / values.len() as f64 } else { sum })
}

/// `filter` accepts `topic` iff every dotted segment is equal or `*`.
pub fn segment_match(filter: &str, topic: &str) -> bool {
    let f: Vec<&str> = filter.split('.').collect();
    let t: Vec<&str> = topic.split('.').collect();
    f.len() == t.len() && f.iter().zip(&t).all(|(a, b)| *a == "*" || a == b)
}
