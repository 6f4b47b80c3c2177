//! TCP backend of the transport: one frame per envelope, a fresh connection
//! per request, and long-lived connections for subscriptions.

use std::collections::BTreeMap;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use dcmon_core::protocol::{read_frame, write_frame, Envelope, Payload, WireError};
use dcmon_core::topic::{Topic, TopicFilter};
use dcmon_core::transport::{Broker, Reply, Subscription, Transport, TransportError};

/// Answers one request; `None` sends nothing back.
pub type RequestHandler = Arc<dyn Fn(Envelope) -> Option<Envelope> + Send + Sync>;

type SharedBroker = Arc<Mutex<Broker>>;

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Accepts envelopes on a TCP port. Requests go to the handler; subscribe
/// frames turn the connection into a publication stream fed by the broker.
pub struct SocketServer {
    addr: SocketAddr,
    broker: SharedBroker,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl SocketServer {
    pub fn bind(addr: impl ToSocketAddrs, handler: RequestHandler) -> io::Result<SocketServer> {
        SocketServer::bind_with_broker(addr, handler, Arc::new(Mutex::new(Broker::new())))
    }

    pub fn bind_with_broker(
        addr: impl ToSocketAddrs,
        handler: RequestHandler,
        broker: SharedBroker,
    ) -> io::Result<SocketServer> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let stop = Arc::clone(&stop);
            let broker = Arc::clone(&broker);
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    match conn {
                        Ok(stream) => {
                            let handler = Arc::clone(&handler);
                            let broker = Arc::clone(&broker);
                            std::thread::spawn(move || {
                                if let Err(e) = serve_connection(stream, &handler, &broker) {
                                    log::debug!("connection closed: {e}");
                                }
                            });
                        }
                        Err(e) => log::warn!("accept failed: {e}"),
                    }
                }
            })
        };
        Ok(SocketServer {
            addr: local,
            broker,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn broker(&self) -> SharedBroker {
        Arc::clone(&self.broker)
    }
}

impl Drop for SocketServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve_connection(
    stream: TcpStream,
    handler: &RequestHandler,
    broker: &SharedBroker,
) -> Result<(), WireError> {
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut reader = stream;
    let mut subs: BTreeMap<TopicFilter, u64> = BTreeMap::new();
    let result = loop {
        let env = match read_frame(&mut reader) {
            Ok(Some(env)) => env,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        };
        match env.payload {
            Payload::Subscribe(filter) => {
                if subs.contains_key(&filter) {
                    continue;
                }
                let (id, rx) = lock(broker).subscribe(filter.clone());
                subs.insert(filter, id);
                let writer = Arc::clone(&writer);
                std::thread::spawn(move || {
                    let mut seq = 0;
                    for (topic, data) in rx {
                        seq += 1;
                        let env = Envelope::new("broker", seq, Payload::Publish { topic, data });
                        if write_frame(&mut *lock(&writer), &env).is_err() {
                            break;
                        }
                    }
                });
            }
            Payload::Unsubscribe(filter) => {
                if let Some(id) = subs.remove(&filter) {
                    lock(broker).unsubscribe(id);
                }
            }
            Payload::Publish { topic, data } => {
                lock(broker).publish(&topic, &data, |_| true);
            }
            _ => {
                if let Some(reply) = handler(env) {
                    if let Err(e) = write_frame(&mut *lock(&writer), &reply) {
                        break Err(e);
                    }
                }
            }
        }
    };
    let mut b = lock(broker);
    for id in subs.into_values() {
        b.unsubscribe(id);
    }
    result
}

/// Client side: requests to known peers plus a local broker for publishing.
/// Share the broker with a [`SocketServer`] to reach remote subscribers.
pub struct SocketTransport {
    peers: RwLock<BTreeMap<String, SocketAddr>>,
    broker: SharedBroker,
}

impl SocketTransport {
    pub fn new() -> Self {
        SocketTransport::with_broker(Arc::new(Mutex::new(Broker::new())))
    }

    pub fn with_broker(broker: SharedBroker) -> Self {
        SocketTransport {
            peers: RwLock::new(BTreeMap::new()),
            broker,
        }
    }

    pub fn add_peer(&self, id: impl Into<String>, addr: SocketAddr) {
        self.peers
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id.into(), addr);
    }

    pub fn remove_peer(&self, id: &str) {
        self.peers
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .remove(id);
    }

    fn peer(&self, id: &str) -> Option<SocketAddr> {
        self.peers
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .copied()
    }
}

impl Default for SocketTransport {
    fn default() -> Self {
        SocketTransport::new()
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
    )
}

impl Transport for SocketTransport {
    fn request(
        &self,
        to: &str,
        envelope: Envelope,
        timeout: Duration,
    ) -> Result<Reply, TransportError> {
        let addr = self
            .peer(to)
            .ok_or_else(|| TransportError::UnknownPeer(to.to_string()))?;
        let started = Instant::now();
        let timed_out = || TransportError::Timeout {
            to: to.to_string(),
            after: timeout,
        };
        let io_err = |e: io::Error| {
            if is_timeout(&e) {
                timed_out()
            } else {
                TransportError::Io(e.to_string())
            }
        };
        let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(io_err)?;
        let left = timeout
            .checked_sub(started.elapsed())
            .filter(|d| !d.is_zero())
            .ok_or_else(timed_out)?;
        stream.set_read_timeout(Some(left)).map_err(io_err)?;
        stream.set_write_timeout(Some(left)).map_err(io_err)?;
        let _ = stream.set_nodelay(true);
        let wire = |e: WireError| match e {
            WireError::Io(e) => io_err(e),
            other => TransportError::Io(other.to_string()),
        };
        write_frame(&mut stream, &envelope).map_err(wire)?;
        match read_frame(&mut stream).map_err(wire)? {
            Some(reply) => Ok(Reply {
                envelope: reply,
                rtt: started.elapsed(),
            }),
            None => Err(TransportError::Io(format!(
                "{to} closed the connection without replying"
            ))),
        }
    }

    fn request_all(
        &self,
        requests: Vec<(String, Envelope)>,
        timeout: Duration,
    ) -> Vec<(String, Result<Reply, TransportError>)> {
        std::thread::scope(|s| {
            let handles: Vec<_> = requests
                .into_iter()
                .map(|(to, env)| {
                    s.spawn(move || {
                        let r = self.request(&to, env, timeout);
                        (to, r)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("request thread panicked"))
                .collect()
        })
    }

    fn publish(&self, topic: &Topic, payload: &[u8]) {
        lock(&self.broker).publish(topic, payload, |_| true);
    }

    fn subscribe(&self, filter: &TopicFilter) -> Result<Subscription, TransportError> {
        let (id, rx) = lock(&self.broker).subscribe(filter.clone());
        let broker = Arc::clone(&self.broker);
        Ok(Subscription::new(
            filter.clone(),
            rx,
            Box::new(move || {
                lock(&broker).unsubscribe(id);
            }),
        ))
    }
}

/// Subscribes over TCP to the broker behind a [`SocketServer`].
pub fn subscribe_remote(
    addr: SocketAddr,
    filter: &TopicFilter,
    timeout: Duration,
) -> Result<Subscription, TransportError> {
    let io_err = |e: io::Error| TransportError::Io(e.to_string());
    let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(io_err)?;
    write_frame(
        &mut stream,
        &Envelope::new("subscriber", 1, Payload::Subscribe(filter.clone())),
    )
    .map_err(|e| TransportError::Io(e.to_string()))?;
    let (tx, rx) = mpsc::channel();
    let mut reader = stream.try_clone().map_err(io_err)?;
    std::thread::spawn(move || {
        while let Ok(Some(env)) = read_frame(&mut reader) {
            if let Payload::Publish { topic, data } = env.payload {
                if tx.send((topic, data)).is_err() {
                    break;
                }
            }
        }
    });
    Ok(Subscription::new(
        filter.clone(),
        rx,
        Box::new(move || {
            let _ = stream.shutdown(Shutdown::Both);
        }),
    ))
}
