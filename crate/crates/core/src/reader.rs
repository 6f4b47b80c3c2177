//! Read-only REST API over the metrics store.
//!
//! All routes live under `/api/metrics-api`. Literal segments win over
//! parameters, and the store-wide routes only match when their first
//! segment is a decimal integer.

use crate::openmetrics::{serialize_exposition, Exposition, Timestamp, CONTENT_TYPE};
use crate::store::{MetricsStore, Scope, StoreError};

pub const API_PREFIX: &str = "/api/metrics-api";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    /// Points of one entity from a timestamp until now.
    Since {
        scope: Scope,
        id: String,
        since: Timestamp,
    },
    Range {
        scope: Scope,
        id: String,
        start: Timestamp,
        end: Timestamp,
    },
    AllSince {
        since: Timestamp,
    },
    AllRange {
        start: Timestamp,
        end: Timestamp,
    },
    Latest {
        scope: Scope,
        id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RouteError {
    NotFound,
    BadRequest(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: String,
}

impl Response {
    fn text(status: u16, body: impl Into<String>) -> Self {
        Response {
            status,
            content_type: "text/plain; charset=utf-8",
            body: body.into(),
        }
    }

    fn exposition(e: &Exposition) -> Self {
        match serialize_exposition(e) {
            Ok(body) => Response {
                status: 200,
                content_type: CONTENT_TYPE,
                body,
            },
            Err(err) => Response::text(500, format!("{err}\n")),
        }
    }
}

fn is_decimal(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

fn timestamp(s: &str) -> Result<Timestamp, RouteError> {
    if !is_decimal(s) {
        return Err(RouteError::BadRequest(format!("bad timestamp `{s}`")));
    }
    s.parse()
        .map_err(|_| RouteError::BadRequest(format!("timestamp `{s}` out of range")))
}

fn ordered(start: Timestamp, end: Timestamp) -> Result<(), RouteError> {
    if start > end {
        return Err(RouteError::BadRequest(format!(
            "start {start} is after end {end}"
        )));
    }
    Ok(())
}

fn scope_of(segment: &str) -> Option<Scope> {
    match segment {
        "nodes" => Some(Scope::Node),
        "dc" => Some(Scope::Dc),
        "containers" => Some(Scope::Container),
        "apps" => Some(Scope::App),
        _ => None,
    }
}

/// Resolves a request path (query string ignored) to a route.
pub fn route(path: &str) -> Result<Route, RouteError> {
    let path = path.split_once('?').map_or(path, |(p, _)| p);
    let rest = path.strip_prefix(API_PREFIX).ok_or(RouteError::NotFound)?;
    let rest = rest.strip_prefix('/').ok_or(RouteError::NotFound)?;
    let segs: Vec<&str> = rest.split('/').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(RouteError::NotFound);
    }
    if let Some(scope) = scope_of(segs[0]) {
        let id = match segs.get(1) {
            Some(id) => id.to_string(),
            None => return Err(RouteError::NotFound),
        };
        return match segs[2..] {
            ["latest"] if matches!(scope, Scope::Node | Scope::Dc) => {
                Ok(Route::Latest { scope, id })
            }
            [since] => Ok(Route::Since {
                scope,
                id,
                since: timestamp(since)?,
            }),
            [start, end] => {
                let (start, end) = (timestamp(start)?, timestamp(end)?);
                ordered(start, end)?;
                Ok(Route::Range {
                    scope,
                    id,
                    start,
                    end,
                })
            }
            _ => Err(RouteError::NotFound),
        };
    }
    if !is_decimal(segs[0]) {
        return Err(RouteError::NotFound);
    }
    match segs[..] {
        [since] => Ok(Route::AllSince {
            since: timestamp(since)?,
        }),
        [start, end] => {
            let (start, end) = (timestamp(start)?, timestamp(end)?);
            ordered(start, end)?;
            Ok(Route::AllRange { start, end })
        }
        _ => Err(RouteError::NotFound),
    }
}

/// Runs a resolved route against the store. Ranges include `start` and
/// exclude `end`; "until now" includes `now`.
pub fn execute(store: &MetricsStore, r: &Route, now: Timestamp) -> Result<Exposition, StoreError> {
    Ok(match r {
        Route::Since { scope, id, since } => store.query_from(*scope, id, *since, now),
        Route::Range {
            scope,
            id,
            start,
            end,
        } => store.query_range(*scope, id, *start, *end)?,
        Route::AllSince { since } => {
            let end = now.saturating_add(1);
            store.query_all((*since).min(end), end)?
        }
        Route::AllRange { start, end } => store.query_all(*start, *end)?,
        Route::Latest { scope, id } => store.latest_crucial(*scope, id),
    })
}

pub fn handle_request(store: &MetricsStore, method: &str, path: &str, now: Timestamp) -> Response {
    if method != "GET" {
        return Response::text(405, "method not allowed\n");
    }
    let r = match route(path) {
        Ok(r) => r,
        Err(RouteError::NotFound) => return Response::text(404, "not found\n"),
        Err(RouteError::BadRequest(m)) => return Response::text(400, format!("{m}\n")),
    };
    match execute(store, &r, now) {
        Ok(e) => Response::exposition(&e),
        Err(StoreError::InvalidRange { start, end }) => {
            Response::text(400, format!("start {start} is after end {end}\n"))
        }
        Err(e) => Response::text(500, format!("{e}\n")),
    }
}
