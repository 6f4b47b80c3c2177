//! Time-series storage for node, DC, container and application scopes.
//!
//! Points live in an ordered map per series. When opened on a directory,
//! every accepted batch is first written to `store.wal` and replayed on the
//! next open. Reads take a shared lock, so a query never observes half of an
//! append.

mod wal;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::openmetrics::{Exposition, LabelSet, MetricFamily, MetricType, Sample, Timestamp};

pub use wal::{encode_record, Wal, WAL_FILE};

/// Families served by the `latest` endpoints and the streaming API unless
/// configured otherwise.
pub const DEFAULT_CRUCIAL_FAMILIES: [&str; 6] = [
    "machine_memory_total_bytes",
    "machine_memory_available_bytes",
    "machine_cpu_cores",
    "machine_cpu_utilization_ratio",
    "machine_disk_available_bytes",
    "machine_network_rx_bytes",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Node,
    Dc,
    Container,
    App,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Node, Scope::Dc, Scope::Container, Scope::App];

    /// Label that carries the scope id on stored samples.
    pub fn label(self) -> &'static str {
        match self {
            Scope::Node => "node",
            Scope::Dc => "dc",
            Scope::Container => "container",
            Scope::App => "app",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeriesKey {
    pub scope: Scope,
    pub scope_id: String,
    pub family: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub suffix: String,
    pub labels: LabelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPoint {
    pub key: SeriesKey,
    pub timestamp: Timestamp,
    pub value: f64,
    #[serde(rename = "type")]
    pub mtype: MetricType,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionConfig {
    pub max_age: Duration,
    pub max_points_per_series: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreConfig {
    pub retention: Option<RetentionConfig>,
    /// Cap on the encoded size of stored points.
    pub max_bytes: Option<u64>,
    pub crucial_families: Vec<String>,
    /// fsync the log after every append.
    pub sync_writes: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            retention: None,
            max_bytes: None,
            crucial_families: DEFAULT_CRUCIAL_FAMILIES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            sync_writes: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid range: start {start} > end {end}")]
    InvalidRange { start: Timestamp, end: Timestamp },
    #[error("storage full")]
    StorageFull,
    #[error("injected persist failure")]
    InjectedFailure,
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("corrupt log: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
struct Series {
    mtype: MetricType,
    points: BTreeMap<Timestamp, f64>,
}

#[derive(Debug, Default)]
struct Inner {
    series: BTreeMap<SeriesKey, Series>,
    points: usize,
    bytes: u64,
}

impl Inner {
    fn contains(&self, key: &SeriesKey, ts: Timestamp) -> bool {
        self.series
            .get(key)
            .is_some_and(|s| s.points.contains_key(&ts))
    }

    fn insert(&mut self, p: &StoredPoint) -> bool {
        let series = self.series.entry(p.key.clone()).or_insert_with(|| Series {
            mtype: p.mtype,
            points: BTreeMap::new(),
        });
        if series.points.contains_key(&p.timestamp) {
            return false;
        }
        series.points.insert(p.timestamp, p.value);
        self.points += 1;
        true
    }

    fn scope_range<'a>(
        &'a self,
        scope: Scope,
        scope_id: &'a str,
    ) -> impl Iterator<Item = (&'a SeriesKey, &'a Series)> + 'a {
        let lo = SeriesKey {
            scope,
            scope_id: scope_id.to_string(),
            family: String::new(),
            suffix: String::new(),
            labels: LabelSet::new(),
        };
        self.series
            .range(lo..)
            .take_while(move |(k, _)| k.scope == scope && k.scope_id == scope_id)
    }

    fn snapshot(&self) -> Vec<StoredPoint> {
        self.series
            .iter()
            .flat_map(|(k, s)| {
                s.points
                    .iter()
                    .map(move |(&timestamp, &value)| StoredPoint {
                        key: k.clone(),
                        timestamp,
                        value,
                        mtype: s.mtype,
                    })
            })
            .collect()
    }
}

fn point_bytes(p: &StoredPoint) -> u64 {
    serde_json::to_vec(p).map(|v| v.len() as u64).unwrap_or(0)
}

#[derive(Debug)]
pub struct MetricsStore {
    config: StoreConfig,
    inner: RwLock<Inner>,
    wal: Mutex<Option<Wal>>,
    fail_next: AtomicU32,
    rejected_appends: AtomicU64,
}

impl MetricsStore {
    /// Volatile store without a log.
    pub fn in_memory(config: StoreConfig) -> Self {
        MetricsStore {
            config,
            inner: RwLock::new(Inner::default()),
            wal: Mutex::new(None),
            fail_next: AtomicU32::new(0),
            rejected_appends: AtomicU64::new(0),
        }
    }

    /// Durable store in `dir`, replaying any existing log.
    pub fn open(dir: &Path, config: StoreConfig) -> Result<Self, StoreError> {
        let (wal, batches) = Wal::open(dir, config.sync_writes)?;
        let mut inner = Inner::default();
        for p in batches.iter().flatten() {
            if inner.insert(p) && config.max_bytes.is_some() {
                inner.bytes += point_bytes(p);
            }
        }
        let store = MetricsStore::in_memory(config);
        *store.inner.write().unwrap() = inner;
        *store.wal.lock().unwrap() = Some(wal);
        Ok(store)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    /// Makes the next `count` appends fail before touching storage.
    pub fn fail_next_appends(&self, count: u32) {
        self.fail_next.fetch_add(count, Ordering::SeqCst);
    }

    pub fn rejected_appends(&self) -> u64 {
        self.rejected_appends.load(Ordering::Relaxed)
    }

    pub fn point_count(&self) -> usize {
        self.inner.read().unwrap().points
    }

    /// Inserts points whose (key, timestamp) is new; returns how many.
    /// The batch is logged before it becomes visible.
    pub fn append(&self, points: &[StoredPoint]) -> Result<usize, StoreError> {
        let mut wal = self.wal.lock().unwrap();
        if self
            .fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            return Err(StoreError::InjectedFailure);
        }
        for p in points {
            if p.timestamp < 0 || p.value.is_nan() {
                return Err(StoreError::InvalidPoint(format!(
                    "{:?} at {}",
                    p.key, p.timestamp
                )));
            }
        }

        let fresh: Vec<StoredPoint> = {
            let inner = self.inner.read().unwrap();
            let mut batch_keys = BTreeSet::new();
            points
                .iter()
                .filter(|p| {
                    !inner.contains(&p.key, p.timestamp) && batch_keys.insert((&p.key, p.timestamp))
                })
                .cloned()
                .collect()
        };
        if fresh.is_empty() {
            return Ok(0);
        }
        let added_bytes: u64 = if self.config.max_bytes.is_some() {
            fresh.iter().map(point_bytes).sum()
        } else {
            0
        };
        if let Some(cap) = self.config.max_bytes {
            if self.inner.read().unwrap().bytes + added_bytes > cap {
                self.rejected_appends.fetch_add(1, Ordering::Relaxed);
                return Err(StoreError::StorageFull);
            }
        }
        if let Some(wal) = wal.as_mut() {
            wal.append(&encode_record(&fresh))?;
        }
        let mut inner = self.inner.write().unwrap();
        for p in &fresh {
            inner.insert(p);
        }
        inner.bytes += added_bytes;
        Ok(fresh.len())
    }

    /// Points of one scope id with `start <= timestamp < end`.
    pub fn query_range(
        &self,
        scope: Scope,
        scope_id: &str,
        start: Timestamp,
        end: Timestamp,
    ) -> Result<Exposition, StoreError> {
        if start > end {
            return Err(StoreError::InvalidRange { start, end });
        }
        let inner = self.inner.read().unwrap();
        let points = inner.scope_range(scope, scope_id).flat_map(|(k, s)| {
            s.points
                .range(start..end)
                .map(move |(&ts, &v)| (k, s.mtype, ts, v))
        });
        Ok(build_exposition(points))
    }

    /// Points of one scope id from `since` up to and including `now`.
    pub fn query_from(
        &self,
        scope: Scope,
        scope_id: &str,
        since: Timestamp,
        now: Timestamp,
    ) -> Exposition {
        let end = now.saturating_add(1);
        self.query_range(scope, scope_id, since.min(end), end)
            .expect("range is ordered")
    }

    /// Points of every scope with `start <= timestamp < end`.
    pub fn query_all(&self, start: Timestamp, end: Timestamp) -> Result<Exposition, StoreError> {
        if start > end {
            return Err(StoreError::InvalidRange { start, end });
        }
        let inner = self.inner.read().unwrap();
        let points = inner.series.iter().flat_map(|(k, s)| {
            s.points
                .range(start..end)
                .map(move |(&ts, &v)| (k, s.mtype, ts, v))
        });
        Ok(build_exposition(points))
    }

    /// Most recent sample of each crucial series for a node or DC.
    pub fn latest_crucial(&self, scope: Scope, scope_id: &str) -> Exposition {
        let inner = self.inner.read().unwrap();
        let crucial: BTreeSet<&str> = self
            .config
            .crucial_families
            .iter()
            .map(String::as_str)
            .collect();
        let points = inner
            .scope_range(scope, scope_id)
            .filter(|(k, _)| crucial.contains(k.family.as_str()))
            .filter_map(|(k, s)| {
                s.points
                    .last_key_value()
                    .map(|(&ts, &v)| (k, s.mtype, ts, v))
            });
        build_exposition(points)
    }

    /// Latest point of every series of `family` under one scope id.
    pub fn latest_points(&self, scope: Scope, scope_id: &str, family: &str) -> Vec<StoredPoint> {
        let inner = self.inner.read().unwrap();
        inner
            .scope_range(scope, scope_id)
            .filter(|(k, _)| k.family == family)
            .filter_map(|(k, s)| {
                s.points
                    .last_key_value()
                    .map(|(&timestamp, &value)| StoredPoint {
                        key: k.clone(),
                        timestamp,
                        value,
                        mtype: s.mtype,
                    })
            })
            .collect()
    }

    /// Every stored point, ordered by series key then timestamp.
    pub fn snapshot(&self) -> Vec<StoredPoint> {
        self.inner.read().unwrap().snapshot()
    }

    /// Drops points older than `max_age` and trims long series, oldest first.
    pub fn apply_retention(&self, now: Timestamp) -> Result<usize, StoreError> {
        let Some(ret) = self.config.retention else {
            return Ok(0);
        };
        let mut wal = self.wal.lock().unwrap();
        let max_age = i64::try_from(ret.max_age.as_millis()).unwrap_or(i64::MAX);
        let cutoff = now.saturating_sub(max_age);
        let mut inner = self.inner.write().unwrap();
        let mut removed = 0;
        for series in inner.series.values_mut() {
            let keep = series.points.split_off(&cutoff);
            removed += series.points.len();
            series.points = keep;
            while series.points.len() > ret.max_points_per_series {
                series.points.pop_first();
                removed += 1;
            }
        }
        inner.series.retain(|_, s| !s.points.is_empty());
        inner.points -= removed;
        if removed > 0 {
            let snapshot = inner.snapshot();
            if self.config.max_bytes.is_some() {
                inner.bytes = snapshot.iter().map(point_bytes).sum();
            }
            if let Some(wal) = wal.as_mut() {
                wal.rewrite(&snapshot)?;
            }
        }
        Ok(removed)
    }
}

/// Groups points into families sorted by name; samples are ordered by
/// (labels, timestamp, suffix). A family whose series disagree on type is
/// emitted as `unknown`.
fn build_exposition<'a>(
    points: impl Iterator<Item = (&'a SeriesKey, MetricType, Timestamp, f64)>,
) -> Exposition {
    let mut families: BTreeMap<&str, (MetricType, Vec<Sample>)> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (key, mtype, ts, value) in points {
        if !seen.insert((&key.family, &key.suffix, &key.labels, ts)) {
            continue;
        }
        let entry = families
            .entry(key.family.as_str())
            .or_insert((mtype, Vec::new()));
        if entry.0 != mtype {
            entry.0 = MetricType::Unknown;
        }
        entry.1.push(Sample {
            suffix: key.suffix.clone(),
            labels: key.labels.clone(),
            value,
            timestamp: Some(ts),
        });
    }
    Exposition {
        families: families
            .into_iter()
            .map(|(name, (mtype, mut samples))| {
                samples.sort_by(|a, b| {
                    (&a.labels, a.timestamp, &a.suffix).cmp(&(&b.labels, b.timestamp, &b.suffix))
                });
                MetricFamily {
                    samples,
                    ..MetricFamily::new(name, mtype)
                }
            })
            .collect(),
    }
}
