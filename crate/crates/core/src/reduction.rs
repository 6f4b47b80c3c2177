//! Agent-side data reduction: exact-repeat deduplication, delta/heartbeat
//! sampling, and last-observation-carried-forward reconstruction.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::openmetrics::{Exposition, LabelSet, MetricFamily, MetricType, Sample, Timestamp};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub dedup_enabled: bool,
    pub sampling: Option<SamplingConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Absolute change that always forces a sample to be kept.
    pub delta: f64,
    /// Longest gap between kept samples of a series.
    pub heartbeat_max: Duration,
}

impl SamplingConfig {
    fn heartbeat_ms(&self) -> i64 {
        i64::try_from(self.heartbeat_max.as_millis()).unwrap_or(i64::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReductionError {
    #[error("query time {0} precedes the first kept sample")]
    BeforeFirstSample(Timestamp),
    #[error("invalid reduction config: {0}")]
    InvalidConfig(String),
}

impl ReductionConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail
    pub fn validate(&self) -> Result<(), ReductionError> {
        if let Some(s) = &self.sampling {
            if !(s.delta >= 0.0) {
                return Err(ReductionError::InvalidConfig(
                    "delta must be non-negative".into(),
                ));
            }
            if s.heartbeat_max.is_zero() {
                return Err(ReductionError::InvalidConfig(
                    "heartbeat_max must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn is_enabled(&self) -> bool {
        self.dedup_enabled || self.sampling.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Drop,
}

/// Identity of a series as seen by the agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeriesId {
    pub family: String,
    pub suffix: String,
    pub labels: LabelSet,
}

impl SeriesId {
    pub fn of(family: &str, sample: &Sample) -> Self {
        SeriesId {
            family: family.to_string(),
            suffix: sample.suffix.clone(),
            labels: sample.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LastKept {
    value: f64,
    timestamp: Option<Timestamp>,
}

/// Last kept point of every series.
#[derive(Debug, Clone, Default)]
pub struct SeriesState {
    last: HashMap<SeriesId, LastKept>,
}

impl SeriesState {
    pub fn last_kept(&self, id: &SeriesId) -> Option<(f64, Option<Timestamp>)> {
        self.last.get(id).map(|k| (k.value, k.timestamp))
    }

    fn record(&mut self, id: &SeriesId, s: &Sample) {
        self.last.insert(
            id.clone(),
            LastKept {
                value: s.value,
                timestamp: s.timestamp,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.last.len()
    }

    pub fn is_empty(&self) -> bool {
        self.last.is_empty()
    }
}

fn dedup_keeps(last: Option<&LastKept>, s: &Sample) -> bool {
    last.is_none_or(|k| k.value.to_bits() != s.value.to_bits())
}

fn sampling_keeps(last: Option<&LastKept>, s: &Sample, cfg: &SamplingConfig) -> bool {
    let Some(k) = last else { return true };
    if (s.value - k.value).abs() > cfg.delta {
        return true;
    }
    match (s.timestamp, k.timestamp) {
        (Some(now), Some(then)) => now.saturating_sub(then) >= cfg.heartbeat_ms(),
        _ => true,
    }
}

/// Drops a sample whose value is bit-identical to the last kept one.
pub fn dedup_filter(state: &mut SeriesState, id: &SeriesId, s: &Sample) -> Verdict {
    if dedup_keeps(state.last.get(id), s) {
        state.record(id, s);
        Verdict::Keep
    } else {
        Verdict::Drop
    }
}

/// Keeps a sample when it moved by more than `delta` from the last kept
/// value, or when `heartbeat_max` elapsed since the last kept sample.
pub fn dynamic_sample(
    state: &mut SeriesState,
    id: &SeriesId,
    s: &Sample,
    cfg: &SamplingConfig,
) -> Verdict {
    if sampling_keeps(state.last.get(id), s, cfg) {
        state.record(id, s);
        Verdict::Keep
    } else {
        Verdict::Drop
    }
}

/// Step reconstruction: the value at `t` is that of the latest kept sample
/// with timestamp `<= t`. `kept` must be sorted by timestamp.
pub fn reconstruct_series(
    kept: &[Sample],
    at: &[Timestamp],
) -> Result<Vec<Sample>, ReductionError> {
    at.iter()
        .map(|&t| {
            let idx = kept.partition_point(|s| s.timestamp.unwrap_or(Timestamp::MIN) <= t);
            if idx == 0 {
                return Err(ReductionError::BeforeFirstSample(t));
            }
            let src = &kept[idx - 1];
            Ok(Sample {
                timestamp: Some(t),
                ..src.clone()
            })
        })
        .collect()
}

/// Stateful reduction pipeline owned by one agent.
#[derive(Debug, Clone, Default)]
pub struct Reducer {
    config: ReductionConfig,
    state: SeriesState,
}

/// Output of one pass through the pipeline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reduced {
    pub kept: Exposition,
    /// Dropped samples with their family name, in input order.
    pub dropped: Vec<(String, Sample)>,
}

impl Reducer {
    pub fn new(config: ReductionConfig) -> Self {
        Reducer {
            config,
            state: SeriesState::default(),
        }
    }

    pub fn config(&self) -> &ReductionConfig {
        &self.config
    }

    /// A sample is kept only if every enabled stage keeps it. Counters skip
    /// the sampling stage. Families left without samples are removed.
    pub fn apply(&mut self, input: Exposition) -> Reduced {
        if !self.config.is_enabled() {
            return Reduced {
                kept: input,
                dropped: Vec::new(),
            };
        }
        let mut out = Reduced::default();
        for fam in input.families {
            let samples = &fam.samples;
            let mut kept_samples = Vec::with_capacity(samples.len());
            for s in samples {
                let id = SeriesId::of(&fam.name, s);
                let last = self.state.last.get(&id);
                let mut keep = !self.config.dedup_enabled || dedup_keeps(last, s);
                if keep && fam.mtype != MetricType::Counter {
                    if let Some(cfg) = &self.config.sampling {
                        keep = sampling_keeps(last, s, cfg);
                    }
                }
                if keep {
                    self.state.record(&id, s);
                    kept_samples.push(s.clone());
                } else {
                    out.dropped.push((fam.name.clone(), s.clone()));
                }
            }
            if !kept_samples.is_empty() || samples.is_empty() {
                out.kept.families.push(MetricFamily {
                    samples: kept_samples,
                    ..fam.clone()
                });
            }
        }
        out
    }
}
