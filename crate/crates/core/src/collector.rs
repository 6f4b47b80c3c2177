//! Synthetic machine/container/application collectors and the scrape client
//! contract used by the agent.
//!
//! A collector exposes a single `GET /metrics` endpoint whose response holds
//! every sample generated since the previous call (or since start, for the
//! first call).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::f64::consts::TAU;
use std::fmt;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::openmetrics::{
    parse_exposition, serialize_exposition, CodecError, Exposition, LabelSet, MetricFamily,
    MetricType, Sample, Timestamp,
};

pub const DROPPED_SAMPLES_FAMILY: &str = "collector_dropped_samples_total";
pub const DEFAULT_SERVED_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Machine,
    Container,
    Application,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Machine, Level::Container, Level::Application];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Machine => "machine",
            Level::Container => "container",
            Level::Application => "application",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    Constant {
        value: f64,
    },
    RandomWalk {
        start: f64,
        step_stddev: f64,
        min: f64,
        max: f64,
    },
    Sine {
        mean: f64,
        amplitude: f64,
        period_s: f64,
    },
    CounterRate {
        rate_per_s: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub family: String,
    #[serde(rename = "type")]
    pub mtype: MetricType,
    #[serde(default)]
    pub labels: LabelSet,
    pub pattern: Pattern,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CollectorError {
    #[error("invalid generator `{family}`: {reason}")]
    InvalidGenerator { family: String, reason: String },
    #[error("collector needs at least one generator")]
    NoGenerators,
    #[error("tick at {now} does not advance past {previous}")]
    NonMonotonicTick { previous: Timestamp, now: Timestamp },
}

impl GeneratorSpec {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail
    pub fn validate(&self) -> Result<(), CollectorError> {
        let bad = |reason: &str| {
            Err(CollectorError::InvalidGenerator {
                family: self.family.clone(),
                reason: reason.to_string(),
            })
        };
        if !crate::openmetrics::is_metric_name(&self.family) {
            return bad("invalid metric name");
        }
        match self.pattern {
            Pattern::CounterRate { rate_per_s } => {
                if self.mtype != MetricType::Counter {
                    return bad("counter_rate requires type counter");
                }
                if !(rate_per_s >= 0.0 && rate_per_s.is_finite()) {
                    return bad("rate_per_s must be finite and non-negative");
                }
            }
            Pattern::RandomWalk {
                start,
                step_stddev,
                min,
                max,
            } => {
                if !(min <= start && start <= max) {
                    return bad("random_walk needs min <= start <= max");
                }
                if !(step_stddev >= 0.0 && step_stddev.is_finite()) {
                    return bad("step_stddev must be finite and non-negative");
                }
            }
            Pattern::Sine { period_s, .. } if !(period_s > 0.0) => {
                return bad("period_s must be positive")
            }
            Pattern::Constant { value } if self.mtype == MetricType::Counter && !(value >= 0.0) => {
                return bad("counter values must be non-negative")
            }
            _ => {}
        }
        if self.mtype == MetricType::Counter
            && !matches!(
                self.pattern,
                Pattern::CounterRate { .. } | Pattern::Constant { .. }
            )
        {
            return bad("counters support only counter_rate or constant patterns");
        }
        Ok(())
    }
}

/// Where a collector can be reached.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Address {
    /// A collector living in the same process, looked up by name.
    InProcess(String),
    /// `host:port` of an HTTP collector.
    Http(String),
}

impl Address {
    pub fn parse(s: &str) -> Address {
        match s.strip_prefix("inproc://") {
            Some(name) => Address::InProcess(name.to_string()),
            None => Address::Http(s.strip_prefix("http://").unwrap_or(s).to_string()),
        }
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Address::InProcess(name) => write!(f, "inproc://{name}"),
            Address::Http(hp) => write!(f, "http://{hp}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectorEndpoint {
    pub level: Level,
    pub address: Address,
    pub generators: Vec<GeneratorSpec>,
}

#[derive(Debug, Clone)]
struct GeneratorState {
    rng: ChaCha8Rng,
    value: Option<f64>,
    last_tick: Option<Timestamp>,
}

impl GeneratorState {
    fn advance(&mut self, spec: &GeneratorSpec, now: Timestamp) -> f64 {
        let value = match (&spec.pattern, self.value) {
            (Pattern::Constant { value }, _) => *value,
            (Pattern::RandomWalk { start, .. }, None) => *start,
            (
                Pattern::RandomWalk {
                    step_stddev,
                    min,
                    max,
                    ..
                },
                Some(prev),
            ) => {
                let step = if *step_stddev > 0.0 {
                    Normal::new(0.0, *step_stddev)
                        .expect("validated stddev")
                        .sample(&mut self.rng)
                } else {
                    0.0
                };
                (prev + step).clamp(*min, *max)
            }
            (
                Pattern::Sine {
                    mean,
                    amplitude,
                    period_s,
                },
                _,
            ) => mean + amplitude * (TAU * (now as f64 / 1000.0) / period_s).sin(),
            (Pattern::CounterRate { .. }, None) => 0.0,
            (Pattern::CounterRate { rate_per_s }, Some(prev)) => {
                let elapsed = (now - self.last_tick.unwrap_or(now)) as f64 / 1000.0;
                prev + rate_per_s * elapsed
            }
        };
        self.value = Some(value);
        self.last_tick = Some(now);
        value
    }
}

/// A running collector: generators plus the samples not yet served.
#[derive(Debug, Clone)]
pub struct Collector {
    endpoint: CollectorEndpoint,
    state: Vec<GeneratorState>,
    pending: VecDeque<(usize, Sample)>,
    capacity: Option<usize>,
    dropped_total: u64,
    dropped_since_serve: bool,
    last_tick: Option<Timestamp>,
    generated_total: u64,
}

impl Collector {
    /// Unbounded collector, as used in simulation.
    pub fn new(endpoint: CollectorEndpoint) -> Result<Self, CollectorError> {
        if endpoint.generators.is_empty() {
            return Err(CollectorError::NoGenerators);
        }
        for g in &endpoint.generators {
            g.validate()?;
        }
        let state = endpoint
            .generators
            .iter()
            .map(|g| GeneratorState {
                rng: ChaCha8Rng::seed_from_u64(g.seed),
                value: None,
                last_tick: None,
            })
            .collect();
        Ok(Collector {
            endpoint,
            state,
            pending: VecDeque::new(),
            capacity: None,
            dropped_total: 0,
            dropped_since_serve: false,
            last_tick: None,
            generated_total: 0,
        })
    }

    /// Collector that keeps at most `capacity` unserved samples, evicting the
    /// oldest first.
    pub fn with_capacity(
        endpoint: CollectorEndpoint,
        capacity: usize,
    ) -> Result<Self, CollectorError> {
        let mut c = Collector::new(endpoint)?;
        c.capacity = Some(capacity);
        Ok(c)
    }

    pub fn endpoint(&self) -> &CollectorEndpoint {
        &self.endpoint
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn dropped_total(&self) -> u64 {
        self.dropped_total
    }

    pub fn generated_total(&self) -> u64 {
        self.generated_total
    }

    /// Produces one sample per generator stamped `now`.
    pub fn generate_tick(&mut self, now: Timestamp) -> Result<Exposition, CollectorError> {
        if let Some(previous) = self.last_tick {
            if now <= previous {
                return Err(CollectorError::NonMonotonicTick { previous, now });
            }
        }
        self.last_tick = Some(now);
        let mut tick = Vec::with_capacity(self.state.len());
        for (i, (spec, st)) in self
            .endpoint
            .generators
            .iter()
            .zip(self.state.iter_mut())
            .enumerate()
        {
            let value = st.advance(spec, now);
            let mut sample = Sample::new(spec.labels.clone(), value, now);
            if spec.mtype == MetricType::Counter {
                sample.suffix = "_total".into();
            }
            tick.push((i, sample));
        }
        self.generated_total += tick.len() as u64;
        let exposition = self.group(tick.iter().map(|(i, s)| (*i, s)));
        for entry in tick {
            if let Some(cap) = self.capacity {
                if self.pending.len() >= cap {
                    self.pending.pop_front();
                    self.dropped_total += 1;
                    self.dropped_since_serve = true;
                    if cap == 0 {
                        continue;
                    }
                }
            }
            self.pending.push_back(entry);
        }
        Ok(exposition)
    }

    /// Discards everything not yet served, returning it (node crash).
    pub fn clear_pending(&mut self) -> Exposition {
        let drained: Vec<_> = self.pending.drain(..).collect();
        self.group(drained.iter().map(|(i, s)| (*i, s)))
    }

    /// Returns the pending samples and forgets them.
    pub fn take_pending(&mut self) -> Exposition {
        let mut e = self.clear_pending();
        if self.capacity.is_some() && std::mem::take(&mut self.dropped_since_serve) {
            let ts = self.last_tick.unwrap_or(0);
            e.families.push(
                MetricFamily::new(DROPPED_SAMPLES_FAMILY, MetricType::Counter)
                    .with_sample(Sample::new(LabelSet::new(), self.dropped_total as f64, ts)),
            );
        }
        e
    }

    /// Body of a `GET /metrics` response.
    pub fn serve_metrics(&mut self) -> String {
        serialize_exposition(&self.take_pending())
            .expect("collector output satisfies exposition invariants")
    }

    fn group<'a>(&self, samples: impl Iterator<Item = (usize, &'a Sample)>) -> Exposition {
        let mut e = Exposition::new();
        for (i, s) in samples {
            let spec = &self.endpoint.generators[i];
            let fam = match e.families.iter().position(|f| f.name == spec.family) {
                Some(idx) => &mut e.families[idx],
                None => {
                    e.families
                        .push(MetricFamily::new(spec.family.clone(), spec.mtype));
                    e.families.last_mut().unwrap()
                }
            };
            fam.samples.push(s.clone());
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScrapeError {
    #[error("target {0} unreachable")]
    Unreachable(String),
    #[error("bad payload from {target}: {source}")]
    BadPayload { target: String, source: CodecError },
}

/// Decodes a scrape response body.
pub fn decode_body(target: &Address, body: &[u8]) -> Result<Exposition, ScrapeError> {
    let bad = |source| ScrapeError::BadPayload {
        target: target.to_string(),
        source,
    };
    let text = std::str::from_utf8(body).map_err(|e| {
        bad(CodecError::Syntax {
            line: 0,
            column: e.valid_up_to() + 1,
            reason: "body is not valid UTF-8".into(),
        })
    })?;
    parse_exposition(text).map_err(bad)
}

/// Client side of the collector contract.
pub trait Scraper {
    fn scrape(&mut self, target: &Address, timeout: Duration) -> Result<Exposition, ScrapeError>;
}

/// In-process collectors addressed by name, with a switch to make them
/// unreachable.
#[derive(Debug, Clone, Default)]
pub struct LocalCollectors {
    collectors: BTreeMap<String, Collector>,
    down: BTreeSet<String>,
}

impl LocalCollectors {
    pub fn new() -> Self {
        LocalCollectors::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, collector: Collector) {
        self.collectors.insert(name.into(), collector);
    }

    pub fn remove(&mut self, name: &str) -> Option<Collector> {
        self.collectors.remove(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Collector> {
        self.collectors.get_mut(name)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Collector)> {
        self.collectors.iter_mut()
    }

    pub fn set_down(&mut self, name: &str, down: bool) {
        if down {
            self.down.insert(name.to_string());
        } else {
            self.down.remove(name);
        }
    }
}

impl Scraper for LocalCollectors {
    fn scrape(&mut self, target: &Address, _timeout: Duration) -> Result<Exposition, ScrapeError> {
        let Address::InProcess(name) = target else {
            return Err(ScrapeError::Unreachable(target.to_string()));
        };
        if self.down.contains(name) {
            return Err(ScrapeError::Unreachable(target.to_string()));
        }
        let collector = self
            .collectors
            .get_mut(name)
            .ok_or_else(|| ScrapeError::Unreachable(target.to_string()))?;
        decode_body(target, collector.serve_metrics().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn endpoint(patterns: Vec<(MetricType, Pattern)>) -> CollectorEndpoint {
        CollectorEndpoint {
            level: Level::Machine,
            address: Address::InProcess("m".into()),
            generators: patterns
                .into_iter()
                .enumerate()
                .map(|(i, (mtype, pattern))| GeneratorSpec {
                    family: format!("g{i}"),
                    mtype,
                    labels: LabelSet::new(),
                    pattern,
                    seed: 7,
                })
                .collect(),
        }
    }

    fn values(e: &Exposition) -> Vec<f64> {
        e.samples().map(|(_, s)| s.value).collect()
    }

    #[test]
    fn constant_generator() {
        let mut c = Collector::new(endpoint(vec![(
            MetricType::Gauge,
            Pattern::Constant { value: 0.0 },
        )]))
        .unwrap();
        for t in 0..3 {
            assert_eq!(values(&c.generate_tick(t).unwrap()), [0.0]);
        }
    }

    #[test]
    fn counter_rate_advances_by_rate() {
        let mut c = Collector::new(endpoint(vec![(
            MetricType::Counter,
            Pattern::CounterRate { rate_per_s: 1.0 },
        )]))
        .unwrap();
        let a = values(&c.generate_tick(5_000).unwrap())[0];
        let b = values(&c.generate_tick(6_000).unwrap())[0];
        assert_eq!(b, a + 1.0);
    }

    #[test]
    fn random_walk_replays_identically() {
        let walk = Pattern::RandomWalk {
            start: 0.5,
            step_stddev: 0.1,
            min: 0.0,
            max: 1.0,
        };
        let run = || {
            let mut c = Collector::new(endpoint(vec![(MetricType::Gauge, walk.clone())])).unwrap();
            (0..50).for_each(|t| {
                c.generate_tick(t * 1000).unwrap();
            });
            c.serve_metrics()
        };
        let a = run();
        assert_eq!(a, run());
        let e = parse_exposition(&a).unwrap();
        assert!(values(&e).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn serve_returns_since_previous_call() {
        let mut c = Collector::new(endpoint(vec![(
            MetricType::Gauge,
            Pattern::Constant { value: 1.0 },
        )]))
        .unwrap();
        assert_eq!(c.serve_metrics(), "# EOF\n");
        c.generate_tick(1).unwrap();
        c.generate_tick(2).unwrap();
        let e = parse_exposition(&c.serve_metrics()).unwrap();
        assert_eq!(e.families.len(), 1);
        assert_eq!(e.sample_count(), 2);
        assert_eq!(c.serve_metrics(), "# EOF\n");
    }

    #[test]
    fn ticks_must_advance() {
        let mut c = Collector::new(endpoint(vec![(
            MetricType::Gauge,
            Pattern::Constant { value: 1.0 },
        )]))
        .unwrap();
        c.generate_tick(10).unwrap();
        assert!(c.generate_tick(10).is_err());
    }

    #[test]
    fn capped_collector_evicts_oldest_and_reports() {
        let mut c = Collector::with_capacity(
            endpoint(vec![(MetricType::Gauge, Pattern::Constant { value: 1.0 })]),
            2,
        )
        .unwrap();
        for t in 1..=5 {
            c.generate_tick(t).unwrap();
        }
        let e = parse_exposition(&c.serve_metrics()).unwrap();
        let ts: Vec<_> = e.families[0]
            .samples
            .iter()
            .map(|s| s.timestamp.unwrap())
            .collect();
        assert_eq!(ts, [4, 5]);
        assert_eq!(
            e.family(DROPPED_SAMPLES_FAMILY).unwrap().samples[0].value,
            3.0
        );
        assert_eq!(c.serve_metrics(), "# EOF\n");
    }

    #[test]
    fn generator_validation() {
        let bad = GeneratorSpec {
            family: "x".into(),
            mtype: MetricType::Gauge,
            labels: LabelSet::new(),
            pattern: Pattern::CounterRate { rate_per_s: 1.0 },
            seed: 0,
        };
        assert!(bad.validate().is_err());
        let walk = GeneratorSpec {
            pattern: Pattern::RandomWalk {
                start: 2.0,
                step_stddev: 1.0,
                min: 0.0,
                max: 1.0,
            },
            ..bad
        };
        assert!(walk.validate().is_err());
        assert!(matches!(
            Collector::new(endpoint(vec![])),
            Err(CollectorError::NoGenerators)
        ));
    }

    #[test]
    fn local_scrape_and_failures() {
        let mut local = LocalCollectors::new();
        let mut c = Collector::new(endpoint(vec![(
            MetricType::Gauge,
            Pattern::Constant { value: 2.0 },
        )]))
        .unwrap();
        c.generate_tick(1).unwrap();
        local.insert("m", c);
        let addr = Address::InProcess("m".into());
        assert_eq!(
            local
                .scrape(&addr, Duration::from_secs(1))
                .unwrap()
                .sample_count(),
            1
        );
        local.set_down("m", true);
        assert!(matches!(
            local.scrape(&addr, Duration::from_secs(1)),
            Err(ScrapeError::Unreachable(_))
        ));
        let missing = Address::InProcess("nope".into());
        assert!(local.scrape(&missing, Duration::from_secs(1)).is_err());
    }

    #[test]
    fn truncated_body_is_bad_payload() {
        let addr = Address::InProcess("m".into());
        match decode_body(&addr, b"# TYPE m gauge\nm 1 0\n# EO") {
            Err(ScrapeError::BadPayload {
                source: CodecError::Syntax { .. },
                ..
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn address_parsing() {
        assert_eq!(Address::parse("inproc://x"), Address::InProcess("x".into()));
        assert_eq!(
            Address::parse("http://127.0.0.1:9100"),
            Address::Http("127.0.0.1:9100".into())
        );
        assert_eq!(
            Address::parse("127.0.0.1:9100").to_string(),
            "http://127.0.0.1:9100"
        );
    }
}
