//! Deterministic simulated network and virtual-time event queue.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Broker, Reply, Subscription, Transport, TransportError};
use crate::openmetrics::Timestamp;
use crate::protocol::Envelope;
use crate::topic::{Topic, TopicFilter};

/// Link cut between two groups during `[from, to)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub a: BTreeSet<String>,
    pub b: BTreeSet<String>,
    pub from: Timestamp,
    pub to: Timestamp,
}

impl Partition {
    pub fn blocks(&self, x: &str, y: &str, now: Timestamp) -> bool {
        (self.from..self.to).contains(&now)
            && ((self.a.contains(x) && self.b.contains(y))
                || (self.b.contains(x) && self.a.contains(y)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimNetConfig {
    pub seed: u64,
    pub latency_min: Duration,
    pub latency_max: Duration,
    pub drop_prob: f64,
    #[serde(default)]
    pub partitions: Vec<Partition>,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        SimNetConfig {
            seed: 0,
            latency_min: Duration::from_millis(1),
            latency_max: Duration::from_millis(20),
            drop_prob: 0.0,
            partitions: Vec::new(),
        }
    }
}

impl SimNetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(format!("drop_prob {} outside [0, 1]", self.drop_prob));
        }
        if self.latency_min > self.latency_max {
            return Err("latency min exceeds max".into());
        }
        if let Some(p) = self.partitions.iter().find(|p| p.from > p.to) {
            return Err(format!("partition window {}..{} is reversed", p.from, p.to));
        }
        Ok(())
    }
}

/// Per-message fate: dropped, or delivered after a latency.
#[derive(Debug, Clone)]
pub struct SimNet {
    config: SimNetConfig,
    rng: ChaCha8Rng,
}

impl SimNet {
    pub fn new(config: SimNetConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        SimNet { config, rng }
    }

    pub fn config(&self) -> &SimNetConfig {
        &self.config
    }

    /// Latency in ms of a message sent at `now`, or `None` if it is lost.
    /// Always consumes the same number of random draws.
    pub fn route(&mut self, from: &str, to: &str, now: Timestamp) -> Option<Timestamp> {
        let roll: f64 = self.rng.random();
        let min = self.config.latency_min.as_millis() as i64;
        let max = self.config.latency_max.as_millis() as i64;
        let latency = self.rng.random_range(min..=max);
        if self
            .config
            .partitions
            .iter()
            .any(|p| p.blocks(from, to, now))
        {
            return None;
        }
        if roll < self.config.drop_prob {
            return None;
        }
        Some(latency)
    }
}

struct Entry<E> {
    at: Timestamp,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Events fire in `(time, scheduling order)` order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    next_seq: u64,
    now: Timestamp,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue::default()
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Events in the past are moved to the current time.
    pub fn schedule(&mut self, at: Timestamp, event: E) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry {
            at: at.max(self.now),
            seq,
            event,
        }));
    }

    pub fn peek_time(&self) -> Option<Timestamp> {
        self.heap.peek().map(|Reverse(e)| e.at)
    }

    /// Next event, advancing the clock to its time.
    pub fn step(&mut self) -> Option<(Timestamp, E)> {
        let Reverse(e) = self.heap.pop()?;
        self.now = e.at;
        Some((e.at, e.event))
    }

    /// Next event with time `<= t`.
    pub fn pop_due(&mut self, t: Timestamp) -> Option<(Timestamp, E)> {
        if self.peek_time()? > t {
            return None;
        }
        self.step()
    }

    /// Fires every event with time `<= t`, including ones scheduled by the
    /// handler, then sets the clock to `t`.
    pub fn run_until(&mut self, t: Timestamp, mut handler: impl FnMut(&mut Self, Timestamp, E)) {
        while let Some((at, e)) = self.pop_due(t) {
            handler(self, at, e);
        }
        self.now = self.now.max(t);
    }
}

pub type Handler = Box<dyn FnMut(&Envelope, Timestamp) -> Option<Envelope> + Send>;

struct Shared {
    net: SimNet,
    now: Timestamp,
    handlers: BTreeMap<String, Option<Handler>>,
    crashed: BTreeSet<String>,
}

/// Synchronous [`Transport`] over a [`SimNet`]: a request completes
/// immediately and its round trip is the sum of both sampled latencies.
#[derive(Clone)]
pub struct SimTransport {
    local: String,
    shared: Arc<Mutex<Shared>>,
    broker: Arc<Mutex<Broker>>,
}

impl SimTransport {
    pub fn new(local: impl Into<String>, config: SimNetConfig) -> Self {
        SimTransport {
            local: local.into(),
            shared: Arc::new(Mutex::new(Shared {
                net: SimNet::new(config),
                now: 0,
                handlers: BTreeMap::new(),
                crashed: BTreeSet::new(),
            })),
            broker: Arc::new(Mutex::new(Broker::new())),
        }
    }

    /// Same network, seen from another peer.
    pub fn as_peer(&self, id: impl Into<String>) -> SimTransport {
        SimTransport {
            local: id.into(),
            ..self.clone()
        }
    }

    pub fn local(&self) -> &str {
        &self.local
    }

    pub fn set_now(&self, now: Timestamp) {
        self.shared.lock().unwrap().now = now;
    }

    pub fn now(&self) -> Timestamp {
        self.shared.lock().unwrap().now
    }

    pub fn register(&self, id: impl Into<String>, handler: Handler) {
        self.shared
            .lock()
            .unwrap()
            .handlers
            .insert(id.into(), Some(handler));
    }

    pub fn set_crashed(&self, id: &str, crashed: bool) {
        let mut s = self.shared.lock().unwrap();
        if crashed {
            s.crashed.insert(id.to_string());
        } else {
            s.crashed.remove(id);
        }
    }
}

impl Transport for SimTransport {
    fn request(
        &self,
        to: &str,
        envelope: Envelope,
        timeout: Duration,
    ) -> Result<Reply, TransportError> {
        let timed_out = || TransportError::Timeout {
            to: to.to_string(),
            after: timeout,
        };
        let (now, mut handler) = {
            let mut s = self.shared.lock().unwrap();
            let now = s.now;
            let slot = s
                .handlers
                .get_mut(to)
                .ok_or_else(|| TransportError::UnknownPeer(to.to_string()))?;
            let Some(handler) = slot.take() else {
                // The peer is busy handling a request of its own.
                return Err(timed_out());
            };
            (now, handler)
        };
        let result = (|| {
            let there = {
                let mut s = self.shared.lock().unwrap();
                if s.crashed.contains(to) {
                    return Err(timed_out());
                }
                s.net.route(&self.local, to, now).ok_or_else(timed_out)?
            };
            let reply = handler(&envelope, now + there).ok_or_else(timed_out)?;
            let back = self
                .shared
                .lock()
                .unwrap()
                .net
                .route(to, &self.local, now + there)
                .ok_or_else(timed_out)?;
            let rtt = Duration::from_millis((there + back) as u64);
            if rtt > timeout {
                return Err(timed_out());
            }
            Ok(Reply {
                envelope: reply,
                rtt,
            })
        })();
        if let Some(slot) = self.shared.lock().unwrap().handlers.get_mut(to) {
            slot.get_or_insert(handler);
        }
        result
    }

    fn publish(&self, topic: &Topic, payload: &[u8]) {
        let mut s = self.shared.lock().unwrap();
        let now = s.now;
        let local = self.local.clone();
        self.broker.lock().unwrap().publish(topic, payload, |id| {
            s.net
                .route(&local, &format!("subscriber-{id}"), now)
                .is_some()
        });
    }

    fn subscribe(&self, filter: &TopicFilter) -> Result<Subscription, TransportError> {
        let (id, rx) = self.broker.lock().unwrap().subscribe(filter.clone());
        let broker = Arc::clone(&self.broker);
        Ok(Subscription::new(
            filter.clone(),
            rx,
            Box::new(move || {
                broker.lock().unwrap().unsubscribe(id);
            }),
        ))
    }
}
