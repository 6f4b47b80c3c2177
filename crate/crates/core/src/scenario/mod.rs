//! Scenario files, the discrete-event runner and its report.
//!
//! A scenario is a TOML document. Times are whole milliseconds of virtual
//! time starting at 0.
//!
//! ```toml
//! seed = 7
//! duration_ms = 600000
//!
//! [agent]
//! delivery_mode = "acknowledged"
//!
//! [[generators]]
//! family = "machine_cpu_cores"
//! type = "gauge"
//! pattern = { kind = "constant", value = 8 }
//!
//! [[dcs]]
//! id = "d1"
//! node_count = 3
//!
//! [[faults]]
//! kind = "node_crash"
//! node = "d1-n2"
//! at_ms = 120000
//!
//! [expect]
//! lost_total = 0
//! ```

mod report;
mod runner;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agent::{DeliveryMode, DROPPED_SEGMENTS_FAMILY, SCRAPE_FAILURES_FAMILY};
use crate::collector::GeneratorSpec;
use crate::processor::{
    default_aggregations, AggFn, AggregationSpec, INGEST_FAILURES_FAMILY, PROCESSOR_ID,
};
use crate::reduction::{ReductionConfig, SamplingConfig};
use crate::topic::TopicFilter;
use crate::transport::{Partition, SimNetConfig};

pub use report::{Assertion, FailedBatch, ReportError, RunReport, LOSS_CAUSES};
pub use runner::{run_scenario, run_scenario_logged};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("run failed: {0}")]
    Run(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    pub health_period_ms: u64,
    pub ping_deadline_ms: u64,
    pub poll_period_ms: u64,
    pub tick_period_ms: u64,
    pub aggregation_period_ms: u64,
    /// Extra time after `duration_ms` with polls and pings but no new
    /// samples, so buffers can drain.
    pub settle_ms: u64,
    pub poll_offset_ms: u64,
    pub health_offset_ms: u64,
    pub aggregation_offset_ms: u64,
    pub register_retry_ms: u64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            health_period_ms: 10_000,
            ping_deadline_ms: 3_000,
            poll_period_ms: 10_000,
            tick_period_ms: 10_000,
            aggregation_period_ms: 30_000,
            settle_ms: 60_000,
            poll_offset_ms: 1_000,
            health_offset_ms: 5_000,
            aggregation_offset_ms: 8_000,
            register_retry_ms: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSpec {
    pub latency_min_ms: u64,
    pub latency_max_ms: u64,
    pub drop_prob: f64,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            latency_min_ms: 1,
            latency_max_ms: 20,
            drop_prob: 0.0,
        }
    }
}

/// Agent settings; unset fields inherit from the enclosing level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub delivery_mode: Option<String>,
    pub ack_timeout_ms: Option<u64>,
    pub buffer_cap_bytes: Option<u64>,
    pub poll_period_ms: Option<u64>,
    pub dedup: Option<bool>,
    pub sampling_delta: Option<f64>,
    pub sampling_heartbeat_ms: Option<u64>,
}

impl AgentSpec {
    fn overlay(&self, over: &AgentSpec) -> AgentSpec {
        AgentSpec {
            delivery_mode: over
                .delivery_mode
                .clone()
                .or_else(|| self.delivery_mode.clone()),
            ack_timeout_ms: over.ack_timeout_ms.or(self.ack_timeout_ms),
            buffer_cap_bytes: over.buffer_cap_bytes.or(self.buffer_cap_bytes),
            poll_period_ms: over.poll_period_ms.or(self.poll_period_ms),
            dedup: over.dedup.or(self.dedup),
            sampling_delta: over.sampling_delta.or(self.sampling_delta),
            sampling_heartbeat_ms: over.sampling_heartbeat_ms.or(self.sampling_heartbeat_ms),
        }
    }

    fn delivery_mode(&self) -> Result<DeliveryMode, ScenarioError> {
        match &self.delivery_mode {
            None => Ok(DeliveryMode::Lossy),
            Some(s) => s.parse().map_err(ScenarioError::Invalid),
        }
    }

    fn reduction(&self) -> Result<ReductionConfig, ScenarioError> {
        let sampling = match (self.sampling_delta, self.sampling_heartbeat_ms) {
            (None, None) => None,
            (Some(delta), Some(hb)) => Some(SamplingConfig {
                delta,
                heartbeat_max: Duration::from_millis(hb),
            }),
            _ => return invalid("sampling_delta and sampling_heartbeat_ms go together"),
        };
        let r = ReductionConfig {
            dedup_enabled: self.dedup.unwrap_or(false),
            sampling,
        };
        r.validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerSpec {
    pub id: String,
    pub generators: Vec<GeneratorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub app_id: String,
    pub generators: Vec<GeneratorSpec>,
    #[serde(default)]
    pub register_at_ms: u64,
    pub deregister_at_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    /// Machine generators; the scenario-wide list when absent.
    pub generators: Option<Vec<GeneratorSpec>>,
    pub container: Option<ContainerSpec>,
    #[serde(default)]
    pub apps: Vec<AppSpec>,
    #[serde(default)]
    pub agent: AgentSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcSpec {
    pub id: String,
    /// Adds nodes `<id>-n1 ..` using the scenario-wide generators.
    #[serde(default)]
    pub node_count: usize,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultSpec {
    NodeCrash {
        node: String,
        at_ms: u64,
    },
    NodeRestart {
        node: String,
        at_ms: u64,
    },
    ProcessorPersistFailure {
        at_ms: u64,
        count: u32,
    },
    /// Cuts every link between group `a` and group `b`. The processor is
    /// named `processor`.
    Partition {
        a: Vec<String>,
        b: Vec<String>,
        from_ms: u64,
        to_ms: u64,
    },
}

impl FaultSpec {
    pub fn at_ms(&self) -> u64 {
        match self {
            FaultSpec::NodeCrash { at_ms, .. }
            | FaultSpec::NodeRestart { at_ms, .. }
            | FaultSpec::ProcessorPersistFailure { at_ms, .. } => *at_ms,
            FaultSpec::Partition { from_ms, .. } => *from_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationEntry {
    pub family: String,
    pub function: String,
    pub staleness_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessorSpec {
    pub send_acks: bool,
    pub dead_ping_every: u64,
    /// Replaces the default aggregation list when present.
    pub aggregations: Option<Vec<AggregationEntry>>,
}

impl Default for ProcessorSpec {
    fn default() -> Self {
        ProcessorSpec {
            send_acks: true,
            dead_ping_every: 5,
            aggregations: None,
        }
    }
}

/// Checks evaluated against the report; all are optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    pub lost_total: Option<u64>,
    /// Every node's generated samples are all in the store.
    pub stored_equals_generated: Option<bool>,
    /// Exact number of node-scope samples of scraped machine families.
    pub node_machine_samples: Option<u64>,
    /// Every lost sample was in a batch whose persist failed.
    pub lost_equals_failed_batches: Option<bool>,
    #[serde(default)]
    pub lost_by_cause: std::collections::BTreeMap<String, u64>,
    /// Every crash is detected within this delay.
    pub max_detection_delay_ms: Option<u64>,
    /// Only crashed nodes are ever declared dead.
    pub no_false_dead: Option<bool>,
    pub min_aggregates: Option<u64>,
    pub min_reduction_dropped: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub duration_ms: u64,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub net: NetSpec,
    #[serde(default)]
    pub agent: AgentSpec,
    #[serde(default)]
    pub processor: ProcessorSpec,
    #[serde(default)]
    pub generators: Vec<GeneratorSpec>,
    pub dcs: Vec<DcSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    /// Streaming filters to subscribe before the run.
    #[serde(default)]
    pub subscriptions: Vec<String>,
    #[serde(default)]
    pub expect: Expectations,
}

/// A node after templates and overrides are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedNode {
    pub id: String,
    pub dc: String,
    pub machine: Vec<GeneratorSpec>,
    pub container: Option<ContainerSpec>,
    pub apps: Vec<AppSpec>,
    pub agent: AgentSpec,
}

pub(crate) const RESERVED_FAMILIES: [&str; 3] = [
    SCRAPE_FAILURES_FAMILY,
    DROPPED_SEGMENTS_FAMILY,
    INGEST_FAILURES_FAMILY,
];

fn check_id(what: &str, id: &str) -> Result<(), ScenarioError> {
    if id.is_empty() || id.contains(['.', '*', '/', ' ']) {
        return invalid(format!(
            "{what} id `{id}` must be non-empty without `.`, `*`, `/` or spaces"
        ));
    }
    Ok(())
}

fn check_generators(owner: &str, gens: &[GeneratorSpec]) -> Result<(), ScenarioError> {
    if gens.is_empty() {
        return invalid(format!("{owner} has no generators"));
    }
    let mut seen = BTreeSet::new();
    for g in gens {
        g.validate()
            .map_err(|e| ScenarioError::Invalid(format!("{owner}: {e}")))?;
        if RESERVED_FAMILIES.contains(&g.family.as_str()) {
            return invalid(format!("{owner}: family {} is reserved", g.family));
        }
        if g.labels
            .iter()
            .any(|(k, _)| crate::agent::RESERVED_LABELS.contains(&k))
        {
            return invalid(format!(
                "{owner}: generator {} uses a reserved label",
                g.family
            ));
        }
        if !seen.insert((g.family.clone(), g.labels.clone())) {
            return invalid(format!("{owner}: duplicate series {}", g.family));
        }
    }
    let mut types = std::collections::BTreeMap::new();
    for g in gens {
        if *types.entry(g.family.clone()).or_insert(g.mtype) != g.mtype {
            return invalid(format!(
                "{owner}: family {} declared with two types",
                g.family
            ));
        }
    }
    Ok(())
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let spec: ScenarioSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let mut spec = ScenarioSpec::from_toml(&std::fs::read_to_string(path)?)?;
        if spec.name.is_empty() {
            spec.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Every node, in declaration order.
    pub fn nodes(&self) -> Vec<ResolvedNode> {
        let mut out = Vec::new();
        for dc in &self.dcs {
            for i in 1..=dc.node_count {
                out.push(ResolvedNode {
                    id: format!("{}-n{i}", dc.id),
                    dc: dc.id.clone(),
                    machine: self.generators.clone(),
                    container: None,
                    apps: Vec::new(),
                    agent: self.agent.clone(),
                });
            }
            for n in &dc.nodes {
                out.push(ResolvedNode {
                    id: n.id.clone(),
                    dc: dc.id.clone(),
                    machine: n
                        .generators
                        .clone()
                        .unwrap_or_else(|| self.generators.clone()),
                    container: n.container.clone(),
                    apps: n.apps.clone(),
                    agent: self.agent.overlay(&n.agent),
                });
            }
        }
        out
    }

    pub fn net_config(&self) -> SimNetConfig {
        let partitions = self
            .faults
            .iter()
            .filter_map(|f| match f {
                FaultSpec::Partition {
                    a,
                    b,
                    from_ms,
                    to_ms,
                } => Some(Partition {
                    a: a.iter().cloned().collect(),
                    b: b.iter().cloned().collect(),
                    from: *from_ms as i64,
                    to: *to_ms as i64,
                }),
                _ => None,
            })
            .collect();
        SimNetConfig {
            seed: self.seed,
            latency_min: Duration::from_millis(self.net.latency_min_ms),
            latency_max: Duration::from_millis(self.net.latency_max_ms),
            drop_prob: self.net.drop_prob,
            partitions,
        }
    }

    pub fn aggregations(&self) -> Result<Vec<AggregationSpec>, ScenarioError> {
        match &self.processor.aggregations {
            None => Ok(default_aggregations(Duration::from_secs(60))),
            Some(list) => list
                .iter()
                .map(|a| {
                    let f = AggFn::parse(&a.function).ok_or_else(|| {
                        ScenarioError::Invalid(format!(
                            "unknown aggregation function {}",
                            a.function
                        ))
                    })?;
                    Ok(AggregationSpec::new(
                        &a.family,
                        f,
                        Duration::from_millis(a.staleness_ms),
                    ))
                })
                .collect(),
        }
    }

    pub fn horizon_ms(&self) -> u64 {
        self.duration_ms + self.timing.settle_ms
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let t = &self.timing;
        if self.duration_ms == 0 {
            return invalid("duration_ms must be positive");
        }
        for (name, v) in [
            ("health_period_ms", t.health_period_ms),
            ("ping_deadline_ms", t.ping_deadline_ms),
            ("poll_period_ms", t.poll_period_ms),
            ("tick_period_ms", t.tick_period_ms),
            ("aggregation_period_ms", t.aggregation_period_ms),
            ("register_retry_ms", t.register_retry_ms),
        ] {
            if v == 0 {
                return invalid(format!("{name} must be positive"));
            }
        }
        if t.ping_deadline_ms >= t.health_period_ms {
            return invalid("ping_deadline_ms must be shorter than health_period_ms");
        }
        self.net_config()
            .validate()
            .map_err(ScenarioError::Invalid)?;
        if self.processor.dead_ping_every == 0 {
            return invalid("dead_ping_every must be positive");
        }
        let aggs = self.aggregations()?;
        if aggs.iter().any(|a| a.staleness_window.is_zero()) {
            return invalid("aggregation staleness must be positive");
        }
        for f in &self.subscriptions {
            f.parse::<TopicFilter>()
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        if self.dcs.is_empty() {
            return invalid("no dcs");
        }
        let mut dc_ids = BTreeSet::new();
        for dc in &self.dcs {
            check_id("dc", &dc.id)?;
            if !dc_ids.insert(&dc.id) {
                return invalid(format!("duplicate dc {}", dc.id));
            }
        }
        let nodes = self.nodes();
        if nodes.is_empty() {
            return invalid("no nodes");
        }
        let mut ids = BTreeSet::new();
        for n in &nodes {
            check_id("node", &n.id)?;
            if n.id == PROCESSOR_ID {
                return invalid(format!("node id `{PROCESSOR_ID}` is reserved"));
            }
            if !ids.insert(n.id.clone()) {
                return invalid(format!("duplicate node {}", n.id));
            }
            check_generators(&format!("node {}", n.id), &n.machine)?;
            if let Some(c) = &n.container {
                check_id("container", &c.id)?;
                check_generators(&format!("container {}", c.id), &c.generators)?;
            }
            let mut apps = BTreeSet::new();
            for a in &n.apps {
                check_id("app", &a.app_id)?;
                if !apps.insert(&a.app_id) {
                    return invalid(format!("node {}: duplicate app {}", n.id, a.app_id));
                }
                check_generators(&format!("app {}", a.app_id), &a.generators)?;
                if a.deregister_at_ms.is_some_and(|d| d <= a.register_at_ms) {
                    return invalid(format!("app {} deregisters before it registers", a.app_id));
                }
            }
            n.agent.delivery_mode()?;
            n.agent.reduction()?;
            if n.agent.poll_period_ms == Some(0)
                || n.agent.ack_timeout_ms == Some(0)
                || n.agent.buffer_cap_bytes == Some(0)
            {
                return invalid(format!(
                    "node {}: agent periods and buffer cap must be positive",
                    n.id
                ));
            }
        }
        for f in &self.faults {
            if f.at_ms() > self.duration_ms {
                return invalid(format!("fault at {} ms is past the duration", f.at_ms()));
            }
            match f {
                FaultSpec::NodeCrash { node, .. } | FaultSpec::NodeRestart { node, .. }
                    if !ids.contains(node) =>
                {
                    return invalid(format!("fault names unknown node {node}"));
                }
                FaultSpec::Partition {
                    a,
                    b,
                    from_ms,
                    to_ms,
                } => {
                    if from_ms > to_ms {
                        return invalid("partition ends before it starts");
                    }
                    if let Some(x) = a
                        .iter()
                        .chain(b)
                        .find(|x| *x != PROCESSOR_ID && !ids.contains(*x))
                    {
                        return invalid(format!("partition names unknown peer {x}"));
                    }
                }
                _ => {}
            }
        }
        for cause in self.expect.lost_by_cause.keys() {
            if !LOSS_CAUSES.contains(&cause.as_str()) {
                return invalid(format!("unknown loss cause {cause}"));
            }
        }
        Ok(())
    }
}
