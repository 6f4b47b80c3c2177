use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use dcmon_core::collector::{decode_body, Address, Collector, ScrapeError, Scraper};
use dcmon_core::openmetrics::{Exposition, Timestamp, CONTENT_TYPE};
use dcmon_core::reader::handle_request;
use dcmon_core::store::MetricsStore;

/// `(status, content type, body)`
pub type HttpReply = (u16, String, String);

type Handler = dyn Fn(&str, &str) -> HttpReply + Send + Sync;

/// Small blocking HTTP/1.1 server; each request gets its own thread.
pub struct HttpServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    accept: Option<JoinHandle<()>>,
}

impl HttpServer {
    pub fn start(
        addr: &str,
        handler: impl Fn(&str, &str) -> HttpReply + Send + Sync + 'static,
    ) -> io::Result<HttpServer> {
        let server = tiny_http::Server::http(addr).map_err(io::Error::other)?;
        let local = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let handler: Arc<Handler> = Arc::new(handler);
        let accept = {
            let server = Arc::clone(&server);
            std::thread::spawn(move || {
                for req in server.incoming_requests() {
                    let handler = Arc::clone(&handler);
                    std::thread::spawn(move || respond(req, &*handler));
                }
            })
        };
        Ok(HttpServer {
            server,
            addr: local,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(self) {}
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn respond(req: tiny_http::Request, handler: &Handler) {
    let (status, content_type, body) = handler(req.method().as_str(), req.url());
    let header = tiny_http::Header::from_bytes("Content-Type", content_type)
        .expect("static header is valid");
    let resp = tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(header);
    if let Err(e) = req.respond(resp) {
        log::debug!("writing response failed: {e}");
    }
}

fn plain(status: u16, body: &str) -> HttpReply {
    (status, "text/plain; charset=utf-8".into(), body.into())
}

/// Serves `GET /metrics` from `collector`.
pub fn serve_collector(addr: &str, collector: Arc<Mutex<Collector>>) -> io::Result<HttpServer> {
    HttpServer::start(addr, move |method, url| {
        let path = url.split('?').next().unwrap_or_default();
        match (method, path) {
            ("GET", "/metrics") => {
                let body = collector
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .serve_metrics();
                (200, CONTENT_TYPE.into(), body)
            }
            (_, "/metrics") => plain(405, "method not allowed\n"),
            _ => plain(404, "not found\n"),
        }
    })
}

/// Serves the read API over `store`. `clock` supplies "now" for open-ended
/// queries.
pub fn serve_reader(
    addr: &str,
    store: Arc<MetricsStore>,
    clock: impl Fn() -> Timestamp + Send + Sync + 'static,
) -> io::Result<HttpServer> {
    HttpServer::start(addr, move |method, url| {
        let r = handle_request(&store, method, url, clock());
        (r.status, r.content_type.into(), r.body)
    })
}

pub fn wall_clock_ms() -> Timestamp {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as Timestamp)
}

/// Scrapes `http://host:port/metrics` targets.
#[derive(Debug, Clone)]
pub struct HttpScraper {
    agent: ureq::Agent,
}

impl HttpScraper {
    pub fn new() -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        HttpScraper { agent }
    }
}

impl Default for HttpScraper {
    fn default() -> Self {
        HttpScraper::new()
    }
}

impl Scraper for HttpScraper {
    fn scrape(&mut self, target: &Address, timeout: Duration) -> Result<Exposition, ScrapeError> {
        let Address::Http(hostport) = target else {
            return Err(ScrapeError::Unreachable(target.to_string()));
        };
        let unreachable = |e: &dyn std::fmt::Display| {
            log::debug!("scrape of {target} failed: {e}");
            ScrapeError::Unreachable(target.to_string())
        };
        let mut resp = self
            .agent
            .get(format!("http://{hostport}/metrics"))
            .config()
            .timeout_global(Some(timeout))
            .build()
            .call()
            .map_err(|e| unreachable(&e))?;
        if resp.status() != 200 {
            return Err(unreachable(&resp.status()));
        }
        let body = resp.body_mut().read_to_vec().map_err(|e| unreachable(&e))?;
        decode_body(target, &body)
    }
}
