//! Run report with text and CSV renderings.
//!
//! The CSV form has one row per fact with columns
//! `section,key,value,detail`, so it can be parsed back losslessly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::openmetrics::Timestamp;

/// Reasons a generated sample never reached the store.
pub const LOSS_CAUSES: [&str; 7] = [
    "in_flight_at_persist_failure",
    "buffer_eviction",
    "drop",
    "crash",
    "target_removed",
    "rejected",
    "undelivered",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailedBatch {
    pub node: String,
    pub batch_seq: u64,
    /// Generated samples in the batch that were not already stored.
    pub samples: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub generated: BTreeMap<String, u64>,
    /// Generated samples found in the store, per node.
    pub stored: BTreeMap<String, u64>,
    /// Every stored point, per scope.
    pub stored_by_scope: BTreeMap<String, u64>,
    pub lost: BTreeMap<String, u64>,
    pub lost_by_cause: BTreeMap<String, u64>,
    pub reduction_dropped: BTreeMap<String, u64>,
    /// Stored samples that no collector generated.
    pub unexpected_stored: u64,
    /// Node-scope points of generated machine families.
    pub node_machine_samples: u64,
    pub dead_transitions: Vec<(String, Timestamp)>,
    pub aggregates_emitted: u64,
    pub failed_batches: Vec<FailedBatch>,
    /// Samples that reached the processor again after being stored.
    pub redelivered_samples: u64,
    pub publications: BTreeMap<String, u64>,
    pub deliveries: BTreeMap<String, u64>,
    pub event_log_digest: String,
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    section: String,
    key: String,
    value: String,
    detail: String,
}

fn sum(m: &BTreeMap<String, u64>) -> u64 {
    m.values().sum()
}

impl RunReport {
    pub fn generated_total(&self) -> u64 {
        sum(&self.generated)
    }

    pub fn stored_total(&self) -> u64 {
        sum(&self.stored)
    }

    pub fn lost_total(&self) -> u64 {
        sum(&self.lost)
    }

    pub fn reduction_dropped_total(&self) -> u64 {
        sum(&self.reduction_dropped)
    }

    /// `generated = stored + lost + reduction_dropped` for every node.
    pub fn conservation_holds(&self) -> bool {
        self.generated.iter().all(|(n, &g)| {
            let get = |m: &BTreeMap<String, u64>| m.get(n).copied().unwrap_or(0);
            g == get(&self.stored) + get(&self.lost) + get(&self.reduction_dropped)
        })
    }

    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} (seed {})", self.scenario, self.seed);
        let _ = writeln!(
            s,
            "generated {}  stored {}  lost {}  reduction dropped {}",
            self.generated_total(),
            self.stored_total(),
            self.lost_total(),
            self.reduction_dropped_total()
        );
        for (cause, n) in &self.lost_by_cause {
            let _ = writeln!(s, "  lost to {cause}: {n}");
        }
        let _ = writeln!(
            s,
            "node-scope machine samples {}",
            self.node_machine_samples
        );
        let scopes: Vec<String> = self
            .stored_by_scope
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        let _ = writeln!(s, "stored by scope: {}", scopes.join(" "));
        if self.unexpected_stored > 0 {
            let _ = writeln!(s, "unexpected stored samples {}", self.unexpected_stored);
        }
        if self.redelivered_samples > 0 {
            let _ = writeln!(s, "redelivered samples {}", self.redelivered_samples);
        }
        for b in &self.failed_batches {
            let _ = writeln!(
                s,
                "failed batch {} from {}: {} samples",
                b.batch_seq, b.node, b.samples
            );
        }
        for (node, at) in &self.dead_transitions {
            let _ = writeln!(s, "dead {node} at {at} ms");
        }
        let _ = writeln!(s, "aggregates emitted {}", self.aggregates_emitted);
        let _ = writeln!(
            s,
            "publications {}  deliveries {}",
            sum(&self.publications),
            sum(&self.deliveries)
        );
        let _ = writeln!(s, "per node:");
        for (n, g) in &self.generated {
            let get = |m: &BTreeMap<String, u64>| m.get(n).copied().unwrap_or(0);
            let _ = writeln!(
                s,
                "  {n}: generated {g} stored {} lost {} reduced {}",
                get(&self.stored),
                get(&self.lost),
                get(&self.reduction_dropped)
            );
        }
        let _ = writeln!(s, "event log digest {}", self.event_log_digest);
        for a in &self.assertions {
            let mark = if a.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{mark} {} {}", a.name, a.detail);
        }
        s
    }

    fn rows(&self) -> Vec<Row> {
        let row = |section: &str, key: &str, value: String, detail: String| Row {
            section: section.into(),
            key: key.into(),
            value,
            detail,
        };
        let mut rows = Vec::new();
        let mut scalar = |key: &str, value: String, default: bool| {
            if !default {
                rows.push(row("meta", key, value, String::new()));
            }
        };
        scalar("scenario", self.scenario.clone(), self.scenario.is_empty());
        scalar("seed", self.seed.to_string(), self.seed == 0);
        scalar(
            "unexpected_stored",
            self.unexpected_stored.to_string(),
            self.unexpected_stored == 0,
        );
        scalar(
            "node_machine_samples",
            self.node_machine_samples.to_string(),
            self.node_machine_samples == 0,
        );
        scalar(
            "aggregates_emitted",
            self.aggregates_emitted.to_string(),
            self.aggregates_emitted == 0,
        );
        scalar(
            "redelivered_samples",
            self.redelivered_samples.to_string(),
            self.redelivered_samples == 0,
        );
        scalar(
            "event_log_digest",
            self.event_log_digest.clone(),
            self.event_log_digest.is_empty(),
        );
        for (section, map) in [
            ("generated", &self.generated),
            ("stored", &self.stored),
            ("stored_by_scope", &self.stored_by_scope),
            ("lost", &self.lost),
            ("lost_by_cause", &self.lost_by_cause),
            ("reduction_dropped", &self.reduction_dropped),
            ("publications", &self.publications),
            ("deliveries", &self.deliveries),
        ] {
            rows.extend(
                map.iter()
                    .map(|(k, v)| row(section, k, v.to_string(), String::new())),
            );
        }
        rows.extend(
            self.dead_transitions
                .iter()
                .map(|(n, at)| row("dead_transition", n, at.to_string(), String::new())),
        );
        rows.extend(self.failed_batches.iter().map(|b| {
            row(
                "failed_batch",
                &b.node,
                b.samples.to_string(),
                b.batch_seq.to_string(),
            )
        }));
        rows.extend(self.assertions.iter().map(|a| {
            row(
                "assertion",
                &a.name,
                if a.passed { "pass" } else { "fail" }.into(),
                a.detail.clone(),
            )
        }));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let rows = self.rows();
        if rows.is_empty() {
            w.write_record(["section", "key", "value", "detail"])
                .expect("in-memory write");
        }
        for r in rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    pub fn from_csv(text: &str) -> Result<RunReport, ReportError> {
        let mut r = RunReport::default();
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row?;
            let bad = |reason: String| ReportError::Row { row: i + 1, reason };
            let num = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("{s}: {e}")));
            match row.section.as_str() {
                "meta" => match row.key.as_str() {
                    "scenario" => r.scenario = row.value,
                    "seed" => r.seed = num(&row.value)?,
                    "unexpected_stored" => r.unexpected_stored = num(&row.value)?,
                    "node_machine_samples" => r.node_machine_samples = num(&row.value)?,
                    "aggregates_emitted" => r.aggregates_emitted = num(&row.value)?,
                    "redelivered_samples" => r.redelivered_samples = num(&row.value)?,
                    "event_log_digest" => r.event_log_digest = row.value,
                    other => return Err(bad(format!("unknown meta key {other}"))),
                },
                "generated" => {
                    r.generated.insert(row.key, num(&row.value)?);
                }
                "stored" => {
                    r.stored.insert(row.key, num(&row.value)?);
                }
                "stored_by_scope" => {
                    r.stored_by_scope.insert(row.key, num(&row.value)?);
                }
                "lost" => {
                    r.lost.insert(row.key, num(&row.value)?);
                }
                "lost_by_cause" => {
                    r.lost_by_cause.insert(row.key, num(&row.value)?);
                }
                "reduction_dropped" => {
                    r.reduction_dropped.insert(row.key, num(&row.value)?);
                }
                "publications" => {
                    r.publications.insert(row.key, num(&row.value)?);
                }
                "deliveries" => {
                    r.deliveries.insert(row.key, num(&row.value)?);
                }
                "dead_transition" => {
                    let at = row
                        .value
                        .parse()
                        .map_err(|e| bad(format!("{}: {e}", row.value)))?;
                    r.dead_transitions.push((row.key, at));
                }
                "failed_batch" => r.failed_batches.push(FailedBatch {
                    samples: num(&row.value)?,
                    batch_seq: num(&row.detail)?,
                    node: row.key,
                }),
                "assertion" => r.assertions.push(Assertion {
                    passed: match row.value.as_str() {
                        "pass" => true,
                        "fail" => false,
                        v => return Err(bad(format!("assertion outcome {v}"))),
                    },
                    name: row.key,
                    detail: row.detail,
                }),
                other => return Err(bad(format!("unknown section {other}"))),
            }
        }
        Ok(r)
    }
}
