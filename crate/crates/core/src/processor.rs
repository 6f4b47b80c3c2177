//! Control-plane processor: node registry, health checks, batch ingestion
//! and DC-level aggregation.
//!
//! The round logic is split into [`Processor::begin_round`],
//! [`Processor::handle_pong`] and [`Processor::finish_round`] so that a
//! discrete-event simulation can interleave them with message delivery;
//! [`Processor::health_check_round`] runs all three over a [`Transport`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use crate::collector::Level;
use crate::kv::{ConfigError, KvFile};
use crate::openmetrics::{
    serialize_exposition, Exposition, LabelSet, MetricFamily, MetricType, Sample, Timestamp,
};
use crate::protocol::{Ack, Envelope, MetricsBatch, Payload};
use crate::store::{MetricsStore, Scope, SeriesKey, StoreError, StoredPoint};
use crate::topic::Topic;
use crate::transport::Transport;

pub const PROCESSOR_ID: &str = "processor";
pub const INGEST_FAILURES_FAMILY: &str = "processor_ingest_failures_total";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFn {
    Sum,
    Avg,
}

impl AggFn {
    pub fn as_str(self) -> &'static str {
        match self {
            AggFn::Sum => "sum",
            AggFn::Avg => "avg",
        }
    }

    pub fn parse(s: &str) -> Option<AggFn> {
        match s {
            "sum" => Some(AggFn::Sum),
            "avg" => Some(AggFn::Avg),
            _ => None,
        }
    }

    pub fn apply(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        let sum: f64 = values.iter().sum();
        Some(match self {
            AggFn::Sum => sum,
            AggFn::Avg => sum / values.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationSpec {
    pub family: String,
    pub function: AggFn,
    pub staleness_window: Duration,
}

impl AggregationSpec {
    pub fn new(family: &str, function: AggFn, staleness_window: Duration) -> Self {
        AggregationSpec {
            family: family.to_string(),
            function,
            staleness_window,
        }
    }
}

pub fn default_aggregations(staleness_window: Duration) -> Vec<AggregationSpec> {
    [
        ("machine_memory_total_bytes", AggFn::Sum),
        ("machine_memory_available_bytes", AggFn::Sum),
        ("machine_cpu_cores", AggFn::Sum),
        ("machine_cpu_utilization_ratio", AggFn::Avg),
    ]
    .into_iter()
    .map(|(f, func)| AggregationSpec::new(f, func, staleness_window))
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessorConfig {
    pub health_period: Duration,
    pub ping_deadline: Duration,
    pub aggregation_period: Duration,
    /// Dead nodes are pinged on every n-th round.
    pub dead_ping_every: u64,
    /// Confirm persisted batches to agents.
    pub send_acks: bool,
    pub aggregations: Vec<AggregationSpec>,
}

impl Default for ProcessorConfig {
    fn default() -> Self {
        ProcessorConfig {
            health_period: Duration::from_secs(10),
            ping_deadline: Duration::from_secs(3),
            aggregation_period: Duration::from_secs(30),
            dead_ping_every: 5,
            send_acks: true,
            aggregations: default_aggregations(Duration::from_secs(60)),
        }
    }
}

impl ProcessorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.health_period.is_zero()
            || self.ping_deadline.is_zero()
            || self.aggregation_period.is_zero()
        {
            return invalid("timing parameters must be positive".into());
        }
        if self.dead_ping_every == 0 {
            return invalid("dead_ping_every must be positive".into());
        }
        let mut seen = BTreeSet::new();
        for s in &self.aggregations {
            if s.staleness_window.is_zero() {
                return invalid(format!("staleness window of {} must be positive", s.family));
            }
            if !seen.insert(&s.family) {
                return invalid(format!("family {} aggregated twice", s.family));
            }
        }
        Ok(())
    }

    /// Reads the flat `key = value` form. `aggregate.<family> = sum|avg`
    /// lines replace the default aggregation list; each may carry its own
    /// `aggregate.<family>.staleness_window_ms`.
    pub fn from_kv(text: &str) -> Result<Self, ConfigError> {
        let mut kv = KvFile::parse(text)?;
        let mut c = ProcessorConfig::default();
        if let Some(v) = kv.take_ms("health_period_ms")? {
            c.health_period = v;
        }
        if let Some(v) = kv.take_ms("ping_deadline_ms")? {
            c.ping_deadline = v;
        }
        if let Some(v) = kv.take_ms("aggregation_period_ms")? {
            c.aggregation_period = v;
        }
        if let Some(v) = kv.take("dead_ping_every")? {
            c.dead_ping_every = v;
        }
        if let Some(v) = kv.take("send_acks")? {
            c.send_acks = v;
        }
        let staleness = kv
            .take_ms("staleness_window_ms")?
            .unwrap_or(Duration::from_secs(60));
        let entries = kv.take_prefixed("aggregate.");
        if entries.is_empty() {
            c.aggregations = default_aggregations(staleness);
        } else {
            let mut specs: BTreeMap<String, AggregationSpec> = BTreeMap::new();
            let mut windows = Vec::new();
            for (key, value) in entries {
                let rest = &key["aggregate.".len()..];
                if let Some(family) = rest.strip_suffix(".staleness_window_ms") {
                    let ms: u64 =
                        value
                            .parse()
                            .map_err(|e: std::num::ParseIntError| ConfigError::Value {
                                key: key.clone(),
                                reason: e.to_string(),
                            })?;
                    windows.push((family.to_string(), Duration::from_millis(ms)));
                } else {
                    let function = AggFn::parse(&value).ok_or_else(|| ConfigError::Value {
                        key: key.clone(),
                        reason: format!("unknown function `{value}`"),
                    })?;
                    specs.insert(
                        rest.to_string(),
                        AggregationSpec::new(rest, function, staleness),
                    );
                }
            }
            for (family, w) in windows {
                specs
                    .get_mut(&family)
                    .ok_or_else(|| {
                        ConfigError::Invalid(format!(
                            "staleness window for unaggregated family {family}"
                        ))
                    })?
                    .staleness_window = w;
            }
            c.aggregations = specs.into_values().collect();
        }
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Alive,
    Dead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub node_id: String,
    pub dc_id: String,
    pub state: NodeState,
    pub last_seen: Timestamp,
    pub last_pong_seq: u64,
    pub address: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ProcessorError {
    #[error("node {node} is registered under dc {registered}, not {claimed}")]
    DcMismatch {
        node: String,
        registered: String,
        claimed: String,
    },
    #[error("malformed batch: {0}")]
    MalformedBatch(String),
    #[error("persist failed: {0}")]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Publication {
    pub topic: Topic,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundReport {
    pub pinged: Vec<String>,
    pub replied: Vec<String>,
    pub newly_dead: Vec<String>,
}

#[derive(Debug)]
pub struct PongOutcome {
    pub node_id: String,
    pub batch_seq: u64,
    pub appended: Result<usize, ProcessorError>,
    /// Batch to confirm to the agent.
    pub ack: Option<u64>,
}

#[derive(Debug)]
pub struct Processor {
    config: ProcessorConfig,
    store: Arc<MetricsStore>,
    registry: BTreeMap<String, NodeRecord>,
    round: u64,
    current: Option<Vec<String>>,
    next_seq: u64,
    ingest_failures_total: u64,
    persist_faults: u32,
    outbox: Vec<Publication>,
}

impl Processor {
    pub fn new(config: ProcessorConfig, store: Arc<MetricsStore>) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Processor {
            config,
            store,
            registry: BTreeMap::new(),
            round: 0,
            current: None,
            next_seq: 0,
            ingest_failures_total: 0,
            persist_faults: 0,
            outbox: Vec::new(),
        })
    }

    pub fn config(&self) -> &ProcessorConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<MetricsStore> {
        &self.store
    }

    pub fn node(&self, id: &str) -> Option<&NodeRecord> {
        self.registry.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.registry.values()
    }

    pub fn dcs(&self) -> BTreeSet<String> {
        self.registry.values().map(|n| n.dc_id.clone()).collect()
    }

    pub fn ingest_failures_total(&self) -> u64 {
        self.ingest_failures_total
    }

    /// The next `count` batch ingests fail as if storage had rejected them.
    pub fn inject_persist_failures(&mut self, count: u32) {
        self.persist_faults += count;
    }

    pub fn take_publications(&mut self) -> Vec<Publication> {
        std::mem::take(&mut self.outbox)
    }

    fn next_seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    pub fn register_node(
        &mut self,
        node_id: &str,
        dc_id: &str,
        address: Option<String>,
        now: Timestamp,
    ) -> Result<(), ProcessorError> {
        match self.registry.get_mut(node_id) {
            Some(rec) if rec.dc_id != dc_id => Err(ProcessorError::DcMismatch {
                node: node_id.to_string(),
                registered: rec.dc_id.clone(),
                claimed: dc_id.to_string(),
            }),
            Some(rec) => {
                rec.state = NodeState::Alive;
                rec.last_seen = rec.last_seen.max(now);
                if address.is_some() {
                    rec.address = address;
                }
                Ok(())
            }
            None => {
                self.registry.insert(
                    node_id.to_string(),
                    NodeRecord {
                        node_id: node_id.to_string(),
                        dc_id: dc_id.to_string(),
                        state: NodeState::Alive,
                        last_seen: now,
                        last_pong_seq: 0,
                        address,
                    },
                );
                Ok(())
            }
        }
    }

    pub fn remove_node(&mut self, node_id: &str) -> Option<NodeRecord> {
        self.registry.remove(node_id)
    }

    /// Starts a round and returns the nodes to ping: every alive node, plus
    /// dead ones on every `dead_ping_every`-th round.
    pub fn begin_round(&mut self, _now: Timestamp) -> Vec<String> {
        self.round += 1;
        let include_dead = self.round.is_multiple_of(self.config.dead_ping_every);
        let pinged: Vec<String> = self
            .registry
            .values()
            .filter(|n| n.state == NodeState::Alive || include_dead)
            .map(|n| n.node_id.clone())
            .collect();
        self.current = Some(pinged.clone());
        pinged
    }

    /// Records a pong and ingests its batch. Any pong revives its node.
    pub fn handle_pong(
        &mut self,
        sender: &str,
        pong_seq: u64,
        batch: &MetricsBatch,
        now: Timestamp,
    ) -> PongOutcome {
        let mut outcome = PongOutcome {
            node_id: sender.to_string(),
            batch_seq: batch.batch_seq,
            appended: Ok(0),
            ack: None,
        };
        if batch.node_id != sender {
            self.ingest_failures_total += 1;
            outcome.appended = Err(ProcessorError::MalformedBatch(format!(
                "batch of {} sent by {sender}",
                batch.node_id
            )));
            return outcome;
        }
        if let Err(e) = self.register_node(sender, &batch.dc_id, None, now) {
            self.ingest_failures_total += 1;
            outcome.appended = Err(e);
            return outcome;
        }
        let rec = self.registry.get_mut(sender).expect("registered above");
        rec.last_pong_seq = rec.last_pong_seq.max(pong_seq);
        outcome.appended = self.ingest_batch(batch);
        match &outcome.appended {
            Ok(_) if self.config.send_acks => outcome.ack = Some(batch.batch_seq),
            Ok(_) => {}
            Err(e) => log::warn!(
                "ingest of batch {} from {sender} failed: {e}",
                batch.batch_seq
            ),
        }
        outcome
    }

    /// Marks every pinged node that did not reply as dead.
    pub fn finish_round(&mut self, _now: Timestamp, replied: &BTreeSet<String>) -> RoundReport {
        let pinged = self.current.take().unwrap_or_default();
        let mut report = RoundReport::default();
        for id in &pinged {
            if replied.contains(id) {
                report.replied.push(id.clone());
                continue;
            }
            if let Some(rec) = self.registry.get_mut(id) {
                if rec.state == NodeState::Alive {
                    rec.state = NodeState::Dead;
                    report.newly_dead.push(id.clone());
                }
            }
        }
        report.pinged = pinged;
        report
    }

    /// One complete health-check round over a live transport.
    pub fn health_check_round(&mut self, now: Timestamp, transport: &dyn Transport) -> RoundReport {
        let pinged = self.begin_round(now);
        let requests = pinged
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    Envelope::new(PROCESSOR_ID, self.next_seq(), Payload::Ping),
                )
            })
            .collect();
        let mut replied = BTreeSet::new();
        for (id, result) in transport.request_all(requests, self.config.ping_deadline) {
            let reply = match result {
                Ok(r) => r,
                Err(e) => {
                    log::debug!("ping of {id} failed: {e}");
                    continue;
                }
            };
            let Payload::Pong(batch) = &reply.envelope.payload else {
                log::warn!("unexpected {} reply from {id}", reply.envelope.kind());
                continue;
            };
            let at = now + reply.rtt.as_millis() as Timestamp;
            let outcome = self.handle_pong(&id, reply.envelope.seq, batch, at);
            replied.insert(id.clone());
            if let Some(seq) = outcome.ack {
                let ack =
                    Envelope::new(PROCESSOR_ID, self.next_seq(), Payload::Ack(Ack::Batch(seq)));
                if let Err(e) = transport.request(&id, ack, self.config.ping_deadline) {
                    log::debug!("ack to {id} failed: {e}");
                }
            }
        }
        for p in self.take_publications() {
            transport.publish(&p.topic, &p.payload);
        }
        self.finish_round(now, &replied)
    }

    fn batch_points(batch: &MetricsBatch) -> Result<Vec<StoredPoint>, ProcessorError> {
        let node = batch.node_id.as_str();
        let malformed = |m: String| ProcessorError::MalformedBatch(m);
        let mut points =
            Vec::with_capacity(batch.sample_count() + batch.self_metrics.sample_count());
        let parts = batch
            .expositions
            .iter()
            .map(|(l, e)| (*l, e))
            .chain([(Level::Machine, &batch.self_metrics)]);
        for (level, e) in parts {
            for (fam, s) in e.samples() {
                if s.labels.get("node") != Some(node) {
                    return Err(malformed(format!(
                        "sample of {} lacks node=\"{node}\"",
                        fam.name
                    )));
                }
                let (scope, scope_id) = match level {
                    Level::Machine => (Scope::Node, node),
                    Level::Container => (
                        Scope::Container,
                        s.labels.get("container").ok_or_else(|| {
                            malformed(format!(
                                "container sample of {} lacks container label",
                                fam.name
                            ))
                        })?,
                    ),
                    Level::Application => (
                        Scope::App,
                        s.labels.get("app").ok_or_else(|| {
                            malformed(format!(
                                "application sample of {} lacks app label",
                                fam.name
                            ))
                        })?,
                    ),
                };
                let timestamp = s
                    .timestamp
                    .ok_or_else(|| malformed(format!("sample of {} has no timestamp", fam.name)))?;
                points.push(StoredPoint {
                    key: SeriesKey {
                        scope,
                        scope_id: scope_id.to_string(),
                        family: fam.name.clone(),
                        suffix: s.suffix.clone(),
                        labels: s.labels.clone(),
                    },
                    timestamp,
                    value: s.value,
                    mtype: fam.mtype,
                });
            }
        }
        Ok(points)
    }

    /// Appends every sample of `batch` and publishes the node's latest
    /// crucial metrics. Returns the number of new points.
    pub fn ingest_batch(&mut self, batch: &MetricsBatch) -> Result<usize, ProcessorError> {
        let result = Self::batch_points(batch).and_then(|points| {
            if self.persist_faults > 0 {
                self.persist_faults -= 1;
                return Err(StoreError::InjectedFailure.into());
            }
            Ok(self.store.append(&points)?)
        });
        match result {
            Ok(n) => {
                self.publish_latest(Scope::Node, &batch.node_id);
                Ok(n)
            }
            Err(e) => {
                self.ingest_failures_total += 1;
                Err(e)
            }
        }
    }

    fn publish_latest(&mut self, scope: Scope, id: &str) {
        let latest = self.store.latest_crucial(scope, id);
        if let Some(p) = latest_publication(scope, id, &latest) {
            self.outbox.push(p);
        }
    }

    /// Aggregates the freshest value of each alive node in `dc_id`, stores
    /// the result under DC scope and queues it for streaming.
    pub fn aggregate_dc(
        &mut self,
        dc_id: &str,
        specs: &[AggregationSpec],
        now: Timestamp,
    ) -> Exposition {
        let alive: Vec<&str> = self
            .registry
            .values()
            .filter(|n| n.dc_id == dc_id && n.state == NodeState::Alive)
            .map(|n| n.node_id.as_str())
            .collect();
        let labels = LabelSet::from_pairs([("dc", dc_id)]).expect("valid labels");
        let mut out = Exposition::new();
        for spec in specs {
            let oldest = now.saturating_sub(spec.staleness_window.as_millis() as Timestamp);
            let values: Vec<f64> = alive
                .iter()
                .flat_map(|node| self.store.latest_points(Scope::Node, node, &spec.family))
                .filter(|p| {
                    (p.key.suffix.is_empty() || p.key.suffix == "_total") && p.timestamp >= oldest
                })
                .map(|p| p.value)
                .collect();
            if let Some(v) = spec.function.apply(&values) {
                out.families.push(
                    MetricFamily::new(spec.family.clone(), MetricType::Gauge)
                        .with_sample(Sample::new(labels.clone(), v, now)),
                );
            }
        }
        let points: Vec<StoredPoint> = out
            .samples()
            .map(|(fam, s)| StoredPoint {
                key: SeriesKey {
                    scope: Scope::Dc,
                    scope_id: dc_id.to_string(),
                    family: fam.name.clone(),
                    suffix: String::new(),
                    labels: s.labels.clone(),
                },
                timestamp: now,
                value: s.value,
                mtype: MetricType::Gauge,
            })
            .collect();
        if let Err(e) = self.store.append(&points) {
            log::warn!("storing aggregates of dc {dc_id} failed: {e}");
        }
        self.publish_latest(Scope::Dc, dc_id);
        out
    }

    /// Aggregates every known DC with the configured specs.
    pub fn aggregate_all(&mut self, now: Timestamp) -> Vec<(String, Exposition)> {
        let specs = self.config.aggregations.clone();
        self.dcs()
            .into_iter()
            .map(|dc| {
                let e = self.aggregate_dc(&dc, &specs, now);
                (dc, e)
            })
            .collect()
    }

    pub fn self_metrics(&self, now: Timestamp) -> Exposition {
        Exposition {
            families: vec![
                MetricFamily::new(INGEST_FAILURES_FAMILY, MetricType::Counter).with_sample(
                    Sample::new(LabelSet::new(), self.ingest_failures_total as f64, now),
                ),
            ],
        }
    }
}

/// Publication of a latest-crucial exposition for a node or DC.
pub fn latest_publication(scope: Scope, id: &str, latest: &Exposition) -> Option<Publication> {
    let topic = match scope {
        Scope::Node => Topic::node(id),
        Scope::Dc => Topic::dc(id),
        Scope::Container | Scope::App => return None,
    }
    .ok()?;
    let payload = serialize_exposition(latest).ok()?.into_bytes();
    Some(Publication { topic, payload })
}
