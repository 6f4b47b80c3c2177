//! Network endpoints: HTTP collectors and reader, an HTTP scrape client and
//! a TCP transport speaking length-prefixed envelopes.

pub mod http;
pub mod socket;

pub use http::{serve_collector, serve_reader, wall_clock_ms, HttpScraper, HttpServer};
pub use socket::{subscribe_remote, RequestHandler, SocketServer, SocketTransport};
