//! Discrete-event execution of a scenario.
//!
//! Every sample a collector generates is tracked by identity (node, family,
//! suffix, final labels, timestamp) until the end of the run, when the store
//! is scanned to decide which ones arrived. Samples that did not arrive are
//! charged to the last loss cause recorded for them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::Receiver;
use std::sync::Arc;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::report::{Assertion, FailedBatch, RunReport};
use super::{AppSpec, FaultSpec, ResolvedNode, ScenarioError, ScenarioSpec, RESERVED_FAMILIES};
use crate::agent::{annotate, Agent, AgentConfig, TargetEntry};
use crate::collector::{
    Address, Collector, CollectorEndpoint, GeneratorSpec, Level, LocalCollectors,
};
use crate::openmetrics::{parse_exposition, Exposition, LabelSet, Timestamp};
use crate::processor::{Processor, ProcessorConfig, Publication, PROCESSOR_ID};
use crate::protocol::MetricsBatch;
use crate::store::{MetricsStore, Scope, StoreConfig};
use crate::topic::TopicFilter;
use crate::transport::{Broker, Delivery, EventQueue, SimNet};

type SampleId = (String, String, String, LabelSet, Timestamp);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fate {
    Pending,
    Stored,
    Reduced,
    Lost(&'static str),
}

#[derive(Debug)]
enum Event {
    Fault(usize),
    Tick,
    Poll(usize),
    Round,
    PingArrive {
        node: usize,
    },
    PongArrive {
        node: usize,
        round: u64,
        batch: Box<MetricsBatch>,
    },
    RoundDeadline {
        round: u64,
    },
    AckArrive {
        node: usize,
        incarnation: u64,
        batch_seq: u64,
    },
    RegisterSend {
        node: usize,
        incarnation: u64,
    },
    RegisterArrive {
        node: usize,
        incarnation: u64,
    },
    RegisterAck {
        node: usize,
        incarnation: u64,
    },
    Aggregate,
    AppRegister {
        node: usize,
        app: usize,
    },
    AppDeregister {
        node: usize,
        app: usize,
    },
}

struct AppState {
    spec: AppSpec,
    active: bool,
    target_id: Option<String>,
}

impl AppState {
    fn collector_name(&self) -> String {
        format!("app-{}", self.spec.app_id)
    }
}

struct SimNode {
    spec: ResolvedNode,
    config: AgentConfig,
    agent: Option<Agent>,
    collectors: LocalCollectors,
    apps: Vec<AppState>,
    up: bool,
    incarnation: u64,
    registered: bool,
    /// Times the node went down and came back.
    down: Vec<(Timestamp, Option<Timestamp>)>,
}

impl SimNode {
    fn target_for(&self, collector: &str) -> TargetEntry {
        if collector == "machine" {
            return TargetEntry {
                target_id: "machine".into(),
                level: Level::Machine,
                address: Address::InProcess(collector.into()),
                app_id: None,
            };
        }
        if let Some(app) = self.apps.iter().find(|a| a.collector_name() == collector) {
            return TargetEntry {
                target_id: app.target_id.clone().unwrap_or_default(),
                level: Level::Application,
                address: Address::InProcess(collector.into()),
                app_id: Some(app.spec.app_id.clone()),
            };
        }
        let (id, _) = self
            .config
            .container_target
            .clone()
            .expect("only known collectors exist");
        TargetEntry {
            target_id: id,
            level: Level::Container,
            address: Address::InProcess(collector.into()),
            app_id: None,
        }
    }

    fn was_down_during(&self, from: Timestamp, to: Timestamp) -> bool {
        self.down
            .iter()
            .any(|&(d, u)| d <= to && u.is_none_or(|u| u >= from))
    }
}

struct WorkDir(PathBuf);

impl Drop for WorkDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn work_dir() -> Result<WorkDir, ScenarioError> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!("dcmon-sim-{}-{n}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir)?;
    Ok(WorkDir(dir))
}

fn derive_seed(seed: u64, parts: &[&str], gen: &GeneratorSpec, idx: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    h.update((idx as u64).to_be_bytes());
    h.update(gen.seed.to_be_bytes());
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().unwrap())
}

fn collector(
    seed: u64,
    node: &str,
    name: &str,
    level: Level,
    gens: &[GeneratorSpec],
) -> Result<Collector, ScenarioError> {
    let generators = gens
        .iter()
        .enumerate()
        .map(|(i, g)| GeneratorSpec {
            seed: derive_seed(seed, &[node, name], g, i),
            ..g.clone()
        })
        .collect();
    Collector::new(CollectorEndpoint {
        level,
        address: Address::InProcess(name.into()),
        generators,
    })
    .map_err(|e| ScenarioError::Invalid(e.to_string()))
}

fn run_err(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Run(e.to_string())
}

struct Sim<'a> {
    spec: &'a ScenarioSpec,
    horizon: Timestamp,
    nodes: Vec<SimNode>,
    index: BTreeMap<String, usize>,
    processor: Processor,
    store: Arc<MetricsStore>,
    net: SimNet,
    broker: Broker,
    subs: Vec<(String, Receiver<Delivery>)>,
    fates: HashMap<SampleId, Fate>,
    generated: BTreeMap<String, u64>,
    round: u64,
    round_open: bool,
    replied: BTreeSet<String>,
    report: RunReport,
    hasher: Sha256,
    log: Option<Vec<String>>,
}

impl<'a> Sim<'a> {
    fn new(spec: &'a ScenarioSpec, dir: &Path, keep_log: bool) -> Result<Self, ScenarioError> {
        let store = Arc::new(MetricsStore::in_memory(StoreConfig {
            sync_writes: false,
            ..StoreConfig::default()
        }));
        let t = &spec.timing;
        let pconfig = ProcessorConfig {
            health_period: Duration::from_millis(t.health_period_ms),
            ping_deadline: Duration::from_millis(t.ping_deadline_ms),
            aggregation_period: Duration::from_millis(t.aggregation_period_ms),
            dead_ping_every: spec.processor.dead_ping_every,
            send_acks: spec.processor.send_acks,
            aggregations: spec.aggregations()?,
        };
        let processor = Processor::new(pconfig, Arc::clone(&store))
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let mut nodes = Vec::new();
        let mut index = BTreeMap::new();
        for n in spec.nodes() {
            let a = &n.agent;
            let mut config = AgentConfig::new(n.id.clone(), n.dc.clone(), dir.join(&n.id));
            config.poll_period =
                Duration::from_millis(a.poll_period_ms.unwrap_or(t.poll_period_ms));
            config.delivery_mode = a.delivery_mode()?;
            config.ack_timeout =
                Duration::from_millis(a.ack_timeout_ms.unwrap_or(t.health_period_ms));
            config.buffer_cap_bytes = a.buffer_cap_bytes.unwrap_or(16 << 20);
            config.reduction = a.reduction()?;
            config.fsync = false;
            config.machine_target = "inproc://machine".into();
            config.container_target = n
                .container
                .as_ref()
                .map(|c| (c.id.clone(), "inproc://container".to_string()));

            let mut collectors = LocalCollectors::new();
            collectors.insert(
                "machine",
                collector(spec.seed, &n.id, "machine", Level::Machine, &n.machine)?,
            );
            if let Some(c) = &n.container {
                collectors.insert(
                    "container",
                    collector(
                        spec.seed,
                        &n.id,
                        "container",
                        Level::Container,
                        &c.generators,
                    )?,
                );
            }
            let apps = n
                .apps
                .iter()
                .map(|a| AppState {
                    spec: a.clone(),
                    active: false,
                    target_id: None,
                })
                .collect();
            let agent = Agent::open(config.clone()).map_err(run_err)?;
            index.insert(n.id.clone(), nodes.len());
            nodes.push(SimNode {
                spec: n,
                config,
                agent: Some(agent),
                collectors,
                apps,
                up: true,
                incarnation: 0,
                registered: false,
                down: Vec::new(),
            });
        }
        let mut broker = Broker::new();
        let subs = spec
            .subscriptions
            .iter()
            .map(|f| {
                let filter: TopicFilter = f
                    .parse()
                    .map_err(|e: crate::topic::TopicError| ScenarioError::Invalid(e.to_string()))?;
                Ok((f.clone(), broker.subscribe(filter).1))
            })
            .collect::<Result<Vec<_>, ScenarioError>>()?;
        Ok(Sim {
            spec,
            horizon: spec.horizon_ms() as Timestamp,
            nodes,
            index,
            processor,
            store,
            net: SimNet::new(spec.net_config()),
            broker,
            subs,
            fates: HashMap::new(),
            generated: BTreeMap::new(),
            round: 0,
            round_open: false,
            replied: BTreeSet::new(),
            report: RunReport {
                scenario: spec.name.clone(),
                seed: spec.seed,
                ..RunReport::default()
            },
            hasher: Sha256::new(),
            log: keep_log.then(Vec::new),
        })
    }

    fn record(&mut self, now: Timestamp, line: String) {
        let entry = format!("{now} {line}\n");
        self.hasher.update(entry.as_bytes());
        if let Some(log) = &mut self.log {
            log.push(entry.trim_end().to_string());
        }
    }

    fn ids<'e>(node: &str, e: &'e Exposition) -> impl Iterator<Item = SampleId> + 'e {
        let node = node.to_string();
        e.samples().map(move |(f, s)| {
            (
                node.clone(),
                f.name.clone(),
                s.suffix.clone(),
                s.labels.clone(),
                s.timestamp.unwrap_or(0),
            )
        })
    }

    /// Charges every tracked, not yet stored sample of `e` to `cause`.
    fn charge(&mut self, node: &str, e: &Exposition, cause: &'static str) -> u64 {
        let mut n = 0;
        for id in Self::ids(node, e) {
            if let Some(f) = self.fates.get_mut(&id) {
                if matches!(f, Fate::Pending | Fate::Lost(_)) {
                    *f = Fate::Lost(cause);
                    n += 1;
                }
            }
        }
        n
    }

    fn deliver(&mut self, pubs: Vec<Publication>) {
        for p in pubs {
            *self
                .report
                .publications
                .entry(p.topic.to_string())
                .or_default() += 1;
            let now = 0;
            let net = &mut self.net;
            self.broker.publish(&p.topic, &p.payload, |id| {
                net.route(PROCESSOR_ID, &format!("subscriber-{id}"), now)
                    .is_some()
            });
        }
    }

    fn schedule_initial(&self, q: &mut EventQueue<Event>) {
        for (i, _) in self.spec.faults.iter().enumerate() {
            q.schedule(self.spec.faults[i].at_ms() as Timestamp, Event::Fault(i));
        }
        let t = &self.spec.timing;
        q.schedule(0, Event::Tick);
        for (i, n) in self.nodes.iter().enumerate() {
            q.schedule(
                0,
                Event::RegisterSend {
                    node: i,
                    incarnation: 0,
                },
            );
            q.schedule(t.poll_offset_ms as Timestamp, Event::Poll(i));
            for (j, app) in n.apps.iter().enumerate() {
                q.schedule(
                    app.spec.register_at_ms as Timestamp,
                    Event::AppRegister { node: i, app: j },
                );
                if let Some(d) = app.spec.deregister_at_ms {
                    q.schedule(d as Timestamp, Event::AppDeregister { node: i, app: j });
                }
            }
        }
        q.schedule(t.health_offset_ms as Timestamp, Event::Round);
        q.schedule(t.aggregation_offset_ms as Timestamp, Event::Aggregate);
    }

    fn handle(
        &mut self,
        q: &mut EventQueue<Event>,
        now: Timestamp,
        ev: Event,
    ) -> Result<(), ScenarioError> {
        let t = &self.spec.timing;
        let next = |period: u64| now + period as Timestamp;
        match ev {
            Event::Tick => {
                self.tick(now)?;
                if next(t.tick_period_ms) < self.spec.duration_ms as Timestamp {
                    q.schedule(next(t.tick_period_ms), Event::Tick);
                }
            }
            Event::Poll(i) => {
                self.poll(i, now)?;
                let period = self.nodes[i].config.poll_period.as_millis() as u64;
                if next(period) <= self.horizon {
                    q.schedule(next(period), Event::Poll(i));
                }
            }
            Event::Round => {
                self.round += 1;
                self.round_open = true;
                self.replied.clear();
                let pinged = self.processor.begin_round(now);
                self.record(
                    now,
                    format!("round {} ping {}", self.round, pinged.join(",")),
                );
                for id in pinged {
                    let i = self.index[&id];
                    if let Some(l) = self.net.route(PROCESSOR_ID, &id, now) {
                        q.schedule(now + l, Event::PingArrive { node: i });
                    }
                }
                q.schedule(
                    next(t.ping_deadline_ms),
                    Event::RoundDeadline { round: self.round },
                );
                if next(t.health_period_ms) <= self.horizon {
                    q.schedule(next(t.health_period_ms), Event::Round);
                }
            }
            Event::PingArrive { node } => {
                let n = &mut self.nodes[node];
                let Some(agent) = n.agent.as_mut().filter(|_| n.up) else {
                    self.record(now, format!("ping {} unanswered", self.nodes[node].spec.id));
                    return Ok(());
                };
                let batch = agent.drain_for_pong(now).map_err(run_err)?;
                let id = n.spec.id.clone();
                self.record(
                    now,
                    format!(
                        "pong {id} batch {} segments {:?} samples {}",
                        batch.batch_seq,
                        batch.segments,
                        batch.sample_count()
                    ),
                );
                match self.net.route(&id, PROCESSOR_ID, now) {
                    Some(l) => q.schedule(
                        now + l,
                        Event::PongArrive {
                            node,
                            round: self.round,
                            batch: Box::new(batch),
                        },
                    ),
                    None => {
                        for (_, e) in &batch.expositions {
                            self.charge(&id, e, "drop");
                        }
                        self.record(now, format!("pong {id} batch {} dropped", batch.batch_seq));
                    }
                }
            }
            Event::PongArrive { node, round, batch } => self.pong(q, node, round, &batch, now),
            Event::RoundDeadline { round } => {
                if round == self.round && self.round_open {
                    self.round_open = false;
                    let r = self.processor.finish_round(now, &self.replied);
                    self.record(
                        now,
                        format!(
                            "deadline {round} replied {} dead {}",
                            r.replied.len(),
                            r.newly_dead.join(",")
                        ),
                    );
                    for id in r.newly_dead {
                        self.report.dead_transitions.push((id, now));
                    }
                }
            }
            Event::AckArrive {
                node,
                incarnation,
                batch_seq,
            } => {
                let n = &mut self.nodes[node];
                if n.up && n.incarnation == incarnation {
                    if let Some(agent) = n.agent.as_mut() {
                        let deleted = agent.handle_ack(batch_seq).map_err(run_err)?;
                        let id = n.spec.id.clone();
                        self.record(now, format!("ack {id} batch {batch_seq} deleted {deleted}"));
                    }
                }
            }
            Event::RegisterSend { node, incarnation } => {
                let n = &self.nodes[node];
                if !n.up || n.incarnation != incarnation || n.registered {
                    return Ok(());
                }
                let id = n.spec.id.clone();
                if let Some(l) = self.net.route(&id, PROCESSOR_ID, now) {
                    q.schedule(now + l, Event::RegisterArrive { node, incarnation });
                }
                q.schedule(
                    next(t.register_retry_ms),
                    Event::RegisterSend { node, incarnation },
                );
            }
            Event::RegisterArrive { node, incarnation } => {
                let (id, dc) = (
                    self.nodes[node].spec.id.clone(),
                    self.nodes[node].spec.dc.clone(),
                );
                self.processor
                    .register_node(&id, &dc, None, now)
                    .map_err(run_err)?;
                self.record(now, format!("register {id}"));
                if let Some(l) = self.net.route(PROCESSOR_ID, &id, now) {
                    q.schedule(now + l, Event::RegisterAck { node, incarnation });
                }
            }
            Event::RegisterAck { node, incarnation } => {
                let n = &mut self.nodes[node];
                if n.incarnation == incarnation {
                    n.registered = true;
                }
            }
            Event::Aggregate => {
                let out = self.processor.aggregate_all(now);
                let emitted: usize = out.iter().map(|(_, e)| e.sample_count()).sum();
                self.report.aggregates_emitted += emitted as u64;
                self.record(now, format!("aggregate {emitted}"));
                let pubs = self.processor.take_publications();
                self.deliver(pubs);
                if next(t.aggregation_period_ms) <= self.horizon {
                    q.schedule(next(t.aggregation_period_ms), Event::Aggregate);
                }
            }
            Event::Fault(i) => self.fault(q, i, now)?,
            Event::AppRegister { node, app } => {
                let seed = self.spec.seed;
                let n = &mut self.nodes[node];
                let a = &mut n.apps[app];
                a.active = true;
                let name = a.collector_name();
                let c = collector(
                    seed,
                    &n.spec.id,
                    &name,
                    Level::Application,
                    &a.spec.generators,
                )?;
                n.collectors.insert(name.clone(), c);
                if let Some(agent) = n.agent.as_mut().filter(|_| n.up) {
                    a.target_id = Some(
                        agent
                            .register_app_target(&a.spec.app_id, &format!("inproc://{name}"))
                            .map_err(run_err)?,
                    );
                }
                let line = format!(
                    "app {} on {} registered",
                    n.apps[app].spec.app_id, n.spec.id
                );
                self.record(now, line);
            }
            Event::AppDeregister { node, app } => {
                let n = &mut self.nodes[node];
                let a = &mut n.apps[app];
                a.active = false;
                if let (Some(agent), Some(tid)) = (n.agent.as_mut(), a.target_id.take()) {
                    agent.deregister_app_target(&tid).map_err(run_err)?;
                }
                let name = a.collector_name();
                let id = n.spec.id.clone();
                if let Some(mut c) = n.collectors.remove(&name) {
                    let mut rest = c.clear_pending();
                    let target = self.nodes[node].target_for(&name);
                    annotate(&mut rest, &id, &target);
                    self.charge(&id, &rest, "target_removed");
                }
                self.record(now, format!("app {name} on {id} deregistered"));
            }
        }
        Ok(())
    }

    fn tick(&mut self, now: Timestamp) -> Result<(), ScenarioError> {
        let mut total = 0;
        for i in 0..self.nodes.len() {
            if !self.nodes[i].up {
                continue;
            }
            let names: Vec<String> = self.nodes[i]
                .collectors
                .iter_mut()
                .map(|(k, _)| k.clone())
                .collect();
            for name in names {
                let target = self.nodes[i].target_for(&name);
                let n = &mut self.nodes[i];
                let mut e = n
                    .collectors
                    .get_mut(&name)
                    .expect("listed")
                    .generate_tick(now)
                    .map_err(run_err)?;
                annotate(&mut e, &n.spec.id, &target);
                let id = n.spec.id.clone();
                for sid in Self::ids(&id, &e) {
                    if self.fates.insert(sid, Fate::Pending).is_some() {
                        return Err(run_err(format!("sample identity generated twice on {id}")));
                    }
                    total += 1;
                }
                *self.generated.entry(id).or_default() += e.sample_count() as u64;
            }
        }
        self.record(now, format!("tick {total}"));
        Ok(())
    }

    fn poll(&mut self, i: usize, now: Timestamp) -> Result<(), ScenarioError> {
        let n = &mut self.nodes[i];
        let Some(agent) = n.agent.as_mut().filter(|_| n.up) else {
            return Ok(());
        };
        let report = agent.poll_cycle(now, &mut n.collectors).map_err(run_err)?;
        let id = n.spec.id.clone();
        for (family, s) in &report.reduction_dropped {
            let sid = (
                id.clone(),
                family.clone(),
                s.suffix.clone(),
                s.labels.clone(),
                s.timestamp.unwrap_or(0),
            );
            if let Some(f) = self.fates.get_mut(&sid) {
                *f = Fate::Reduced;
            }
        }
        for seg in &report.evicted {
            let text = std::str::from_utf8(&seg.payload).map_err(run_err)?;
            let e = parse_exposition(text).map_err(run_err)?;
            self.charge(&id, &e, "buffer_eviction");
        }
        for (_, e) in &report.rejected {
            self.charge(&id, e, "rejected");
        }
        self.record(
            now,
            format!(
                "poll {id} segments {:?} evicted {} reduced {} failures {}",
                report.segments,
                report.evicted.len(),
                report.reduction_dropped.len(),
                report.scrape_failures.len()
            ),
        );
        Ok(())
    }

    fn pong(
        &mut self,
        q: &mut EventQueue<Event>,
        node: usize,
        round: u64,
        batch: &MetricsBatch,
        now: Timestamp,
    ) {
        let id = self.nodes[node].spec.id.clone();
        let ids: Vec<SampleId> = batch
            .expositions
            .iter()
            .flat_map(|(_, e)| Self::ids(&id, e))
            .collect();
        let redelivered = ids
            .iter()
            .filter(|s| self.fates.get(*s) == Some(&Fate::Stored))
            .count();
        self.report.redelivered_samples += redelivered as u64;
        let outcome = self.processor.handle_pong(&id, batch.batch_seq, batch, now);
        let in_time = self.round_open && round == self.round;
        if in_time {
            self.replied.insert(id.clone());
        }
        match &outcome.appended {
            Ok(n) => {
                for sid in &ids {
                    if let Some(f) = self.fates.get_mut(sid) {
                        *f = Fate::Stored;
                    }
                }
                self.record(
                    now,
                    format!(
                        "ingest {id} batch {} appended {n} in_time {in_time}",
                        batch.batch_seq
                    ),
                );
            }
            Err(e) => {
                let mut lost = 0;
                for (_, e) in &batch.expositions {
                    lost += self.charge(&id, e, "in_flight_at_persist_failure");
                }
                self.report.failed_batches.push(FailedBatch {
                    node: id.clone(),
                    batch_seq: batch.batch_seq,
                    samples: lost,
                });
                self.record(
                    now,
                    format!("ingest {id} batch {} failed: {e}", batch.batch_seq),
                );
            }
        }
        if let Some(seq) = outcome.ack {
            if let Some(l) = self.net.route(PROCESSOR_ID, &id, now) {
                let incarnation = self.nodes[node].incarnation;
                q.schedule(
                    now + l,
                    Event::AckArrive {
                        node,
                        incarnation,
                        batch_seq: seq,
                    },
                );
            }
        }
        let pubs = self.processor.take_publications();
        self.deliver(pubs);
    }

    fn fault(
        &mut self,
        q: &mut EventQueue<Event>,
        i: usize,
        now: Timestamp,
    ) -> Result<(), ScenarioError> {
        match self.spec.faults[i].clone() {
            FaultSpec::NodeCrash { node, .. } => {
                let idx = self.index[&node];
                if !self.nodes[idx].up {
                    return Ok(());
                }
                let n = &mut self.nodes[idx];
                n.up = false;
                n.agent = None;
                n.registered = false;
                n.incarnation += 1;
                n.down.push((now, None));
                let names: Vec<String> = n.collectors.iter_mut().map(|(k, _)| k.clone()).collect();
                let mut lost = 0;
                for name in names {
                    let target = self.nodes[idx].target_for(&name);
                    let mut e = self.nodes[idx]
                        .collectors
                        .get_mut(&name)
                        .expect("listed")
                        .clear_pending();
                    annotate(&mut e, &node, &target);
                    lost += self.charge(&node, &e, "crash");
                }
                self.record(now, format!("crash {node} unscraped {lost}"));
            }
            FaultSpec::NodeRestart { node, .. } => {
                let idx = self.index[&node];
                let n = &mut self.nodes[idx];
                if n.up {
                    return Ok(());
                }
                n.up = true;
                n.incarnation += 1;
                if let Some(last) = n.down.last_mut() {
                    last.1 = Some(now);
                }
                let mut agent = Agent::open(n.config.clone()).map_err(run_err)?;
                for a in n.apps.iter_mut().filter(|a| a.active) {
                    let name = a.collector_name();
                    a.target_id = Some(
                        agent
                            .register_app_target(&a.spec.app_id, &format!("inproc://{name}"))
                            .map_err(run_err)?,
                    );
                }
                let reloaded = agent.buffer().len();
                n.agent = Some(agent);
                let incarnation = n.incarnation;
                self.record(now, format!("restart {node} reloaded {reloaded}"));
                q.schedule(
                    now,
                    Event::RegisterSend {
                        node: idx,
                        incarnation,
                    },
                );
            }
            FaultSpec::ProcessorPersistFailure { count, .. } => {
                self.processor.inject_persist_failures(count);
                self.record(now, format!("persist failures armed {count}"));
            }
            FaultSpec::Partition {
                a,
                b,
                from_ms,
                to_ms,
            } => {
                self.record(
                    now,
                    format!(
                        "partition {} | {} {from_ms}..{to_ms}",
                        a.join(","),
                        b.join(",")
                    ),
                );
            }
        }
        Ok(())
    }

    fn finish(mut self) -> (RunReport, Option<Vec<String>>) {
        let mut stored_ids = BTreeSet::new();
        for p in self.store.snapshot() {
            *self
                .report
                .stored_by_scope
                .entry(p.key.scope.to_string())
                .or_default() += 1;
            if p.key.scope == Scope::Dc || RESERVED_FAMILIES.contains(&p.key.family.as_str()) {
                continue;
            }
            let node = p.key.labels.get("node").unwrap_or_default().to_string();
            let sid = (
                node,
                p.key.family.clone(),
                p.key.suffix.clone(),
                p.key.labels.clone(),
                p.timestamp,
            );
            if self.fates.contains_key(&sid) {
                if p.key.scope == Scope::Node {
                    self.report.node_machine_samples += 1;
                }
                stored_ids.insert(sid);
            } else {
                self.report.unexpected_stored += 1;
            }
        }
        for (sid, fate) in &self.fates {
            let node = sid.0.clone();
            let bucket = if stored_ids.contains(sid) {
                &mut self.report.stored
            } else {
                let cause = match fate {
                    Fate::Reduced => None,
                    Fate::Lost(c) => Some(*c),
                    Fate::Pending | Fate::Stored => Some("undelivered"),
                };
                match cause {
                    None => &mut self.report.reduction_dropped,
                    Some(c) => {
                        *self.report.lost_by_cause.entry(c.to_string()).or_default() += 1;
                        &mut self.report.lost
                    }
                }
            };
            *bucket.entry(node).or_default() += 1;
        }
        self.report.generated = self.generated.clone();
        for (name, rx) in &self.subs {
            *self.report.deliveries.entry(name.clone()).or_default() +=
                rx.try_iter().count() as u64;
        }
        self.report.event_log_digest = hex::encode(self.hasher.clone().finalize());
        self.report.assertions = self.evaluate();
        (self.report, self.log)
    }

    fn evaluate(&self) -> Vec<Assertion> {
        let r = &self.report;
        let e = &self.spec.expect;
        let mut out = Vec::new();
        let mut check = |name: &str, passed: bool, detail: String| {
            out.push(Assertion {
                name: name.into(),
                passed,
                detail,
            })
        };
        check(
            "conservation",
            r.conservation_holds() && r.unexpected_stored == 0,
            format!(
                "generated {} = stored {} + lost {} + reduced {}; unexpected {}",
                r.generated_total(),
                r.stored_total(),
                r.lost_total(),
                r.reduction_dropped_total(),
                r.unexpected_stored
            ),
        );
        if let Some(want) = e.lost_total {
            check(
                "lost_total",
                r.lost_total() == want,
                format!("lost {} want {want}", r.lost_total()),
            );
        }
        if e.stored_equals_generated == Some(true) {
            check(
                "stored_equals_generated",
                r.generated.iter().all(|(n, g)| r.stored.get(n) == Some(g)),
                format!(
                    "stored {} generated {}",
                    r.stored_total(),
                    r.generated_total()
                ),
            );
        }
        if let Some(want) = e.node_machine_samples {
            check(
                "node_machine_samples",
                r.node_machine_samples == want,
                format!("{} want {want}", r.node_machine_samples),
            );
        }
        if e.lost_equals_failed_batches == Some(true) {
            let failed: u64 = r.failed_batches.iter().map(|b| b.samples).sum();
            let only_persist = r
                .lost_by_cause
                .keys()
                .all(|c| c == "in_flight_at_persist_failure");
            check(
                "lost_equals_failed_batches",
                r.lost_total() == failed && only_persist && !r.failed_batches.is_empty(),
                format!(
                    "lost {} failed batches {} ({:?})",
                    r.lost_total(),
                    failed,
                    r.lost_by_cause
                ),
            );
        }
        for (cause, want) in &e.lost_by_cause {
            let got = r.lost_by_cause.get(cause).copied().unwrap_or(0);
            check(
                &format!("lost_by_cause.{cause}"),
                got == *want,
                format!("{got} want {want}"),
            );
        }
        if let Some(max) = e.max_detection_delay_ms {
            for f in &self.spec.faults {
                let FaultSpec::NodeCrash { node, at_ms } = f else {
                    continue;
                };
                let at = *at_ms as Timestamp;
                let detected = r
                    .dead_transitions
                    .iter()
                    .find(|(n, d)| n == node && *d >= at)
                    .map(|(_, d)| *d);
                let passed = detected.is_some_and(|d| d - at <= max as Timestamp);
                check(
                    &format!("detection.{node}"),
                    passed,
                    format!("crash at {at} detected {detected:?}"),
                );
            }
        }
        if e.no_false_dead == Some(true) {
            let deadline = self.spec.timing.ping_deadline_ms as Timestamp;
            let false_dead: Vec<String> = r
                .dead_transitions
                .iter()
                .filter(|(n, d)| !self.nodes[self.index[n]].was_down_during(d - deadline, *d))
                .map(|(n, d)| format!("{n}@{d}"))
                .collect();
            check(
                "no_false_dead",
                false_dead.is_empty(),
                format!("false positives {false_dead:?}"),
            );
        }
        if let Some(min) = e.min_aggregates {
            check(
                "min_aggregates",
                r.aggregates_emitted >= min,
                format!("{} want >= {min}", r.aggregates_emitted),
            );
        }
        if let Some(min) = e.min_reduction_dropped {
            check(
                "min_reduction_dropped",
                r.reduction_dropped_total() >= min,
                format!("{} want >= {min}", r.reduction_dropped_total()),
            );
        }
        out
    }
}

fn run(
    spec: &ScenarioSpec,
    keep_log: bool,
) -> Result<(RunReport, Option<Vec<String>>), ScenarioError> {
    spec.validate()?;
    let dir = work_dir()?;
    let mut sim = Sim::new(spec, &dir.0, keep_log)?;
    let mut q = EventQueue::new();
    sim.schedule_initial(&mut q);
    let horizon = sim.horizon;
    let mut failure = None;
    q.run_until(horizon, |q, now, ev| {
        if failure.is_none() {
            if let Err(e) = sim.handle(q, now, ev) {
                failure = Some(e);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(sim.finish())
}

/// Runs a scenario to its horizon.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<RunReport, ScenarioError> {
    run(spec, false).map(|(r, _)| r)
}

/// Runs a scenario and also returns the event log the digest covers.
pub fn run_scenario_logged(spec: &ScenarioSpec) -> Result<(RunReport, Vec<String>), ScenarioError> {
    run(spec, true).map(|(r, log)| (r, log.unwrap_or_default()))
}
