//! Node agent: polls collectors, reduces and buffers their output, and
//! hands buffered metrics over when the control plane pings.

mod buffer;

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use crate::collector::{Address, Level, ScrapeError, Scraper};
use crate::kv::{ConfigError, KvFile};
use crate::openmetrics::{
    merge_expositions, parse_exposition, serialize_exposition, CodecError, Exposition, LabelSet,
    MetricFamily, MetricType, Sample, Timestamp,
};
use crate::protocol::MetricsBatch;
use crate::reduction::{Reducer, ReductionConfig, SamplingConfig};

pub use buffer::{BufferSegment, SegmentBuffer, SegmentState, HWM_FILE, SEGMENT_EXT};

pub const SCRAPE_FAILURES_FAMILY: &str = "agent_scrape_failures_total";
pub const DROPPED_SEGMENTS_FAMILY: &str = "agent_dropped_segments_total";
/// Labels the agent owns; collector labels with these names are kept under
/// `exported_<name>`.
pub const RESERVED_LABELS: [&str; 4] = ["node", "dc", "container", "app"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeliveryMode {
    /// Buffered data is deleted once handed to the transport.
    #[default]
    Lossy,
    /// Buffered data is deleted once the control plane confirms it.
    Acknowledged,
}

impl FromStr for DeliveryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lossy" => Ok(DeliveryMode::Lossy),
            "acknowledged" => Ok(DeliveryMode::Acknowledged),
            _ => Err(format!("unknown delivery mode `{s}`")),
        }
    }
}

impl DeliveryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DeliveryMode::Lossy => "lossy",
            DeliveryMode::Acknowledged => "acknowledged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub node_id: String,
    pub dc_id: String,
    pub poll_period: Duration,
    pub delivery_mode: DeliveryMode,
    pub ack_timeout: Duration,
    pub buffer_dir: PathBuf,
    pub buffer_cap_bytes: u64,
    pub reduction: ReductionConfig,
    pub scrape_timeout: Duration,
    /// fsync buffer files before renaming them into place.
    pub fsync: bool,
    pub machine_target: String,
    /// `(container id, address)` of the container-level collector.
    pub container_target: Option<(String, String)>,
}

impl AgentConfig {
    pub fn new(
        node_id: impl Into<String>,
        dc_id: impl Into<String>,
        buffer_dir: impl Into<PathBuf>,
    ) -> Self {
        AgentConfig {
            node_id: node_id.into(),
            dc_id: dc_id.into(),
            poll_period: Duration::from_secs(10),
            delivery_mode: DeliveryMode::Lossy,
            ack_timeout: Duration::from_secs(30),
            buffer_dir: buffer_dir.into(),
            buffer_cap_bytes: 64 << 20,
            reduction: ReductionConfig::default(),
            scrape_timeout: Duration::from_secs(2),
            fsync: true,
            machine_target: "127.0.0.1:9100".into(),
            container_target: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.node_id.is_empty() || self.dc_id.is_empty() {
            return invalid("node_id and dc_id must be non-empty");
        }
        if self.poll_period.is_zero() {
            return invalid("poll_period must be positive");
        }
        if self.ack_timeout.is_zero() {
            return invalid("ack_timeout must be positive");
        }
        if self.buffer_cap_bytes == 0 {
            return invalid("buffer_cap_bytes must be positive");
        }
        self.reduction
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Reads the flat `key = value` form; durations are in milliseconds.
    pub fn from_kv(text: &str) -> Result<Self, ConfigError> {
        let mut kv = KvFile::parse(text)?;
        let mut c = AgentConfig::new(
            kv.require_str("node_id")?,
            kv.require_str("dc_id")?,
            kv.require_str("buffer_dir")?,
        );
        if let Some(v) = kv.take_ms("poll_period_ms")? {
            c.poll_period = v;
        }
        if let Some(v) = kv.take::<DeliveryMode>("delivery_mode")? {
            c.delivery_mode = v;
        }
        if let Some(v) = kv.take_ms("ack_timeout_ms")? {
            c.ack_timeout = v;
        }
        if let Some(v) = kv.take("buffer_cap_bytes")? {
            c.buffer_cap_bytes = v;
        }
        if let Some(v) = kv.take_ms("scrape_timeout_ms")? {
            c.scrape_timeout = v;
        }
        if let Some(v) = kv.take("fsync")? {
            c.fsync = v;
        }
        if let Some(v) = kv.take("dedup_enabled")? {
            c.reduction.dedup_enabled = v;
        }
        let delta = kv.take::<f64>("sampling_delta")?;
        let heartbeat = kv.take_ms("sampling_heartbeat_max_ms")?;
        c.reduction.sampling = match (delta, heartbeat) {
            (None, None) => None,
            (Some(delta), Some(heartbeat_max)) => Some(SamplingConfig {
                delta,
                heartbeat_max,
            }),
            _ => {
                return Err(ConfigError::Invalid(
                    "sampling_delta and sampling_heartbeat_max_ms go together".into(),
                ))
            }
        };
        if let Some(v) = kv.take_str("machine_target") {
            c.machine_target = v;
        }
        c.container_target = match (kv.take_str("container_id"), kv.take_str("container_target")) {
            (None, None) => None,
            (Some(id), Some(addr)) => Some((id, addr)),
            _ => {
                return Err(ConfigError::Invalid(
                    "container_id and container_target go together".into(),
                ))
            }
        };
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "node_id = {}\ndc_id = {}\nbuffer_dir = {}\npoll_period_ms = {}\ndelivery_mode = {}\nack_timeout_ms = {}\n\
             buffer_cap_bytes = {}\nscrape_timeout_ms = {}\nfsync = {}\ndedup_enabled = {}\nmachine_target = {}\n",
            self.node_id,
            self.dc_id,
            self.buffer_dir.display(),
            self.poll_period.as_millis(),
            self.delivery_mode.as_str(),
            self.ack_timeout.as_millis(),
            self.buffer_cap_bytes,
            self.scrape_timeout.as_millis(),
            self.fsync,
            self.reduction.dedup_enabled,
            self.machine_target,
        );
        if let Some(s) = &self.reduction.sampling {
            out += &format!(
                "sampling_delta = {}\nsampling_heartbeat_max_ms = {}\n",
                s.delta,
                s.heartbeat_max.as_millis()
            );
        }
        if let Some((id, addr)) = &self.container_target {
            out += &format!("container_id = {id}\ncontainer_target = {addr}\n");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetEntry {
    pub target_id: String,
    pub level: Level,
    pub address: Address,
    pub app_id: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("target address {0} already registered")]
    DuplicateTarget(String),
    #[error("unknown target {0}")]
    UnknownTarget(String),
    #[error("target {0} is not an application target")]
    NotRemovable(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("buffer i/o: {0}")]
    Io(#[from] io::Error),
}

/// What one poll cycle did.
#[derive(Debug, Default)]
pub struct PollReport {
    pub segments: Vec<u64>,
    /// Segments pushed out of the buffer to make room.
    pub evicted: Vec<BufferSegment>,
    pub scrape_failures: Vec<(String, ScrapeError)>,
    /// Scraped output that could not be merged with its level, by target.
    pub rejected: Vec<(String, Exposition)>,
    pub reduction_dropped: Vec<(String, Sample)>,
}

/// Level a sample belongs to, judged from the labels the agent injects.
pub fn level_of(labels: &LabelSet) -> Level {
    if labels.get("app").is_some() {
        Level::Application
    } else if labels.get("container").is_some() {
        Level::Container
    } else {
        Level::Machine
    }
}

fn payload_level(payload: &[u8]) -> Level {
    std::str::from_utf8(payload)
        .ok()
        .and_then(|t| parse_exposition(t).ok())
        .and_then(|e| e.samples().next().map(|(_, s)| level_of(&s.labels)))
        .unwrap_or(Level::Machine)
}

/// Adds the agent's identifying labels to one sample's label set.
pub fn annotate_labels(labels: &mut LabelSet, node_id: &str, target: &TargetEntry) {
    let wanted = |name: &str, labels: &LabelSet| -> Option<String> {
        match (name, target.level) {
            ("node", _) => Some(node_id.to_string()),
            ("container", Level::Container) => Some(
                labels
                    .get("container")
                    .unwrap_or(&target.target_id)
                    .to_string(),
            ),
            ("app", Level::Application) => target.app_id.clone(),
            _ => None,
        }
    };
    for name in RESERVED_LABELS {
        let want = wanted(name, labels);
        if let Some(have) = labels.get(name) {
            if want.as_deref() != Some(have) {
                let have = labels.remove(name).unwrap();
                labels
                    .insert(&format!("exported_{name}"), have)
                    .expect("valid label name");
            }
        }
        if let Some(v) = want {
            labels.insert(name, v).expect("valid label name");
        }
    }
}

pub fn annotate(e: &mut Exposition, node_id: &str, target: &TargetEntry) {
    for fam in &mut e.families {
        for s in &mut fam.samples {
            annotate_labels(&mut s.labels, node_id, target);
        }
    }
}

#[derive(Debug)]
pub struct Agent {
    config: AgentConfig,
    targets: Vec<TargetEntry>,
    next_app: u64,
    buffer: SegmentBuffer,
    reducer: Reducer,
    /// Segments carried by each unacknowledged batch.
    batches: BTreeMap<u64, Vec<u64>>,
    scrape_failures_total: u64,
    dropped_segments_total: u64,
}

impl Agent {
    /// Starts an agent, reloading anything left in its buffer directory.
    pub fn open(config: AgentConfig) -> Result<Agent, AgentError> {
        config.validate()?;
        let buffer = SegmentBuffer::open(
            &config.buffer_dir,
            config.buffer_cap_bytes,
            config.fsync,
            payload_level,
        )?;
        let mut targets = vec![TargetEntry {
            target_id: "machine".into(),
            level: Level::Machine,
            address: Address::parse(&config.machine_target),
            app_id: None,
        }];
        if let Some((id, addr)) = &config.container_target {
            targets.push(TargetEntry {
                target_id: id.clone(),
                level: Level::Container,
                address: Address::parse(addr),
                app_id: None,
            });
        }
        Ok(Agent {
            reducer: Reducer::new(config.reduction.clone()),
            config,
            targets,
            next_app: 0,
            buffer,
            batches: BTreeMap::new(),
            scrape_failures_total: 0,
            dropped_segments_total: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn targets(&self) -> &[TargetEntry] {
        &self.targets
    }

    pub fn buffer(&self) -> &SegmentBuffer {
        &self.buffer
    }

    pub fn scrape_failures_total(&self) -> u64 {
        self.scrape_failures_total
    }

    pub fn dropped_segments_total(&self) -> u64 {
        self.dropped_segments_total
    }

    pub fn register_app_target(
        &mut self,
        app_id: &str,
        address: &str,
    ) -> Result<String, AgentError> {
        let address = Address::parse(address);
        if self.targets.iter().any(|t| t.address == address) {
            return Err(AgentError::DuplicateTarget(address.to_string()));
        }
        self.next_app += 1;
        let target_id = format!("app-{}", self.next_app);
        self.targets.push(TargetEntry {
            target_id: target_id.clone(),
            level: Level::Application,
            address,
            app_id: Some(app_id.to_string()),
        });
        Ok(target_id)
    }

    pub fn deregister_app_target(&mut self, target_id: &str) -> Result<(), AgentError> {
        let idx = self
            .targets
            .iter()
            .position(|t| t.target_id == target_id)
            .ok_or_else(|| AgentError::UnknownTarget(target_id.to_string()))?;
        if self.targets[idx].level != Level::Application {
            return Err(AgentError::NotRemovable(target_id.to_string()));
        }
        self.targets.remove(idx);
        Ok(())
    }

    /// Scrapes every target and buffers at most one segment per level.
    pub fn poll_cycle(
        &mut self,
        now: Timestamp,
        scraper: &mut dyn Scraper,
    ) -> Result<PollReport, AgentError> {
        let mut report = PollReport::default();
        for level in Level::ALL {
            let mut merged: Option<Exposition> = None;
            for t in self.targets.iter().filter(|t| t.level == level) {
                let mut e = match scraper.scrape(&t.address, self.config.scrape_timeout) {
                    Ok(e) => e,
                    Err(err) => {
                        log::debug!("scrape of {} failed: {err}", t.target_id);
                        self.scrape_failures_total += 1;
                        report.scrape_failures.push((t.target_id.clone(), err));
                        continue;
                    }
                };
                e.fill_timestamps(now);
                annotate(&mut e, &self.config.node_id, t);
                merged = match merged {
                    None => Some(e),
                    Some(m) => match merge_expositions([&m, &e]) {
                        Ok(next) => Some(next),
                        Err(err) => {
                            log::warn!("output of {} conflicts with its level: {err}", t.target_id);
                            self.scrape_failures_total += 1;
                            report.rejected.push((t.target_id.clone(), e));
                            Some(m)
                        }
                    },
                };
            }
            let Some(merged) = merged else { continue };
            let reduced = self.reducer.apply(merged);
            report.reduction_dropped.extend(reduced.dropped);
            if reduced.kept.sample_count() == 0 {
                continue;
            }
            let text = serialize_exposition(&reduced.kept)?;
            let (seq, evicted) = self.buffer.push(level, now, text.into_bytes())?;
            self.dropped_segments_total += evicted.len() as u64;
            report.evicted.extend(evicted);
            report.segments.extend(seq);
        }
        Ok(report)
    }

    fn self_metrics(&self, now: Timestamp) -> Exposition {
        let labels =
            LabelSet::from_pairs([("node", self.config.node_id.as_str())]).expect("valid labels");
        let counter = |name: &str, v: u64| {
            MetricFamily::new(name, MetricType::Counter).with_sample(Sample::new(
                labels.clone(),
                v as f64,
                now,
            ))
        };
        Exposition {
            families: vec![
                counter(SCRAPE_FAILURES_FAMILY, self.scrape_failures_total),
                counter(DROPPED_SEGMENTS_FAMILY, self.dropped_segments_total),
            ],
        }
    }

    /// Builds the batch for a pong from every pending segment, plus in-flight
    /// ones whose acknowledgement is overdue.
    pub fn drain_for_pong(&mut self, now: Timestamp) -> Result<MetricsBatch, AgentError> {
        let acked = self.config.delivery_mode == DeliveryMode::Acknowledged;
        let timeout = self.config.ack_timeout.as_millis() as i64;
        let eligible: Vec<u64> = self
            .buffer
            .segments()
            .filter(|s| match s.state {
                SegmentState::Pending => true,
                SegmentState::InFlight { sent_at } => {
                    acked && now.saturating_sub(sent_at) >= timeout
                }
            })
            .map(|s| s.seq)
            .collect();
        let batch_seq = self.buffer.next_seq()?;

        let mut per_level: BTreeMap<Level, Vec<Exposition>> = BTreeMap::new();
        let mut carried = Vec::with_capacity(eligible.len());
        for seq in eligible {
            let seg = self.buffer.get(seq).expect("eligible segment exists");
            let parsed = std::str::from_utf8(&seg.payload)
                .map_err(|e| e.to_string())
                .and_then(|t| parse_exposition(t).map_err(|e| e.to_string()));
            match parsed {
                Ok(e) => {
                    per_level.entry(seg.level).or_default().push(e);
                    carried.push(seq);
                }
                Err(err) => {
                    log::warn!("discarding unreadable buffer segment {seq}: {err}");
                    self.buffer.remove(seq)?;
                    self.dropped_segments_total += 1;
                }
            }
        }
        let mut expositions = Vec::new();
        for (level, parts) in per_level {
            match merge_expositions(&parts) {
                Ok(m) => expositions.push((level, m)),
                Err(_) => expositions.extend(parts.into_iter().map(|p| (level, p))),
            }
        }

        for &seq in &carried {
            if acked {
                self.buffer.mark_in_flight(seq, now);
            } else {
                self.buffer.remove(seq)?;
            }
        }
        if acked && !carried.is_empty() {
            self.batches.insert(batch_seq, carried.clone());
        }
        Ok(MetricsBatch {
            node_id: self.config.node_id.clone(),
            dc_id: self.config.dc_id.clone(),
            batch_seq,
            expositions,
            self_metrics: self.self_metrics(now),
            segments: carried,
        })
    }

    /// Deletes the in-flight segments carried by batch `batch_seq`. Returns
    /// how many were deleted; unknown or repeated acks delete nothing.
    pub fn handle_ack(&mut self, batch_seq: u64) -> Result<usize, AgentError> {
        if self.config.delivery_mode == DeliveryMode::Lossy {
            log::debug!("ignoring ack {batch_seq} in lossy mode");
            return Ok(0);
        }
        let Some(segments) = self.batches.remove(&batch_seq) else {
            log::debug!("ignoring stale ack {batch_seq}");
            return Ok(0);
        };
        let mut deleted = 0;
        for seq in segments {
            if matches!(self.buffer.get(seq), Some(s) if s.state != SegmentState::Pending) {
                self.buffer.remove(seq)?;
                deleted += 1;
            }
        }
        let live: BTreeSet<u64> = self.buffer.segments().map(|s| s.seq).collect();
        self.batches
            .retain(|_, segs| segs.iter().any(|s| live.contains(s)));
        Ok(deleted)
    }
}
