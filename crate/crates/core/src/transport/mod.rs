//! Request/reply and publish/subscribe between nodes, control plane and
//! streaming clients.

mod sim;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::mpsc::{self, Receiver, Sender};
use std::time::Duration;

use crate::protocol::Envelope;
use crate::topic::{topic_match, Topic, TopicFilter};

pub use sim::{EventQueue, Partition, SimNet, SimNetConfig, SimTransport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("request to {to} timed out after {after:?}")]
    Timeout { to: String, after: Duration },
    #[error("unknown peer {0}")]
    UnknownPeer(String),
    #[error("bad filter: {0}")]
    BadFilter(String),
    #[error("transport failure: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub envelope: Envelope,
    pub rtt: Duration,
}

pub type Delivery = (Topic, Vec<u8>);

pub trait Transport: Send + Sync {
    fn request(
        &self,
        to: &str,
        envelope: Envelope,
        timeout: Duration,
    ) -> Result<Reply, TransportError>;

    /// Issues several requests; results come back in input order.
    fn request_all(
        &self,
        requests: Vec<(String, Envelope)>,
        timeout: Duration,
    ) -> Vec<(String, Result<Reply, TransportError>)> {
        requests
            .into_iter()
            .map(|(to, env)| {
                let r = self.request(&to, env, timeout);
                (to, r)
            })
            .collect()
    }

    /// At-most-once delivery to every matching subscription.
    fn publish(&self, topic: &Topic, payload: &[u8]);

    fn subscribe(&self, filter: &TopicFilter) -> Result<Subscription, TransportError>;
}

/// Stream of publications matching one filter. Dropping it unsubscribes.
pub struct Subscription {
    filter: TopicFilter,
    rx: Receiver<Delivery>,
    on_drop: Option<Box<dyn FnOnce() + Send>>,
}

impl fmt::Debug for Subscription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Subscription")
            .field("filter", &self.filter)
            .finish_non_exhaustive()
    }
}

impl Subscription {
    pub fn new(
        filter: TopicFilter,
        rx: Receiver<Delivery>,
        on_drop: Box<dyn FnOnce() + Send>,
    ) -> Self {
        Subscription {
            filter,
            rx,
            on_drop: Some(on_drop),
        }
    }

    pub fn filter(&self) -> &TopicFilter {
        &self.filter
    }

    pub fn try_recv(&self) -> Option<Delivery> {
        self.rx.try_recv().ok()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Delivery> {
        self.rx.recv_timeout(timeout).ok()
    }

    /// Everything delivered so far.
    pub fn drain(&self) -> Vec<Delivery> {
        std::iter::from_fn(|| self.try_recv()).collect()
    }

    pub fn unsubscribe(self) {}
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Some(f) = self.on_drop.take() {
            f();
        }
    }
}

/// Subscription table shared by both backends.
#[derive(Debug, Default)]
pub struct Broker {
    subs: BTreeMap<u64, (TopicFilter, Sender<Delivery>)>,
    next_id: u64,
}

impl Broker {
    pub fn new() -> Self {
        Broker::default()
    }

    pub fn subscribe(&mut self, filter: TopicFilter) -> (u64, Receiver<Delivery>) {
        let (tx, rx) = mpsc::channel();
        self.next_id += 1;
        self.subs.insert(self.next_id, (filter, tx));
        (self.next_id, rx)
    }

    pub fn unsubscribe(&mut self, id: u64) -> bool {
        self.subs.remove(&id).is_some()
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    /// Sends to each matching subscription for which `admit(id)` holds, in
    /// subscription order. Returns the number of deliveries.
    pub fn publish(
        &mut self,
        topic: &Topic,
        payload: &[u8],
        mut admit: impl FnMut(u64) -> bool,
    ) -> usize {
        let mut delivered = 0;
        let mut gone = Vec::new();
        for (&id, (filter, tx)) in &self.subs {
            if !topic_match(filter, topic) || !admit(id) {
                continue;
            }
            if tx.send((topic.clone(), payload.to_vec())).is_ok() {
                delivered += 1;
            } else {
                gone.push(id);
            }
        }
        for id in gone {
            self.subs.remove(&id);
        }
        delivered
    }
}
