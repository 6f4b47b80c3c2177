//! Streaming topics `metrics.{nodes|dc}.{id}` and single-segment `*` filters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::store::Scope;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopicError {
    #[error("bad topic `{0}`")]
    BadTopic(String),
    #[error("bad topic filter `{0}`")]
    BadFilter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TopicKind {
    Nodes,
    Dc,
}

impl TopicKind {
    pub const ALL: [TopicKind; 2] = [TopicKind::Nodes, TopicKind::Dc];

    pub fn as_str(self) -> &'static str {
        match self {
            TopicKind::Nodes => "nodes",
            TopicKind::Dc => "dc",
        }
    }

    fn parse(s: &str) -> Option<TopicKind> {
        match s {
            "nodes" => Some(TopicKind::Nodes),
            "dc" => Some(TopicKind::Dc),
            _ => None,
        }
    }

    pub fn scope(self) -> Scope {
        match self {
            TopicKind::Nodes => Scope::Node,
            TopicKind::Dc => Scope::Dc,
        }
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.contains(['.', '*'])
}

/// A concrete topic.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Topic {
    kind: TopicKind,
    id: String,
}

impl Topic {
    pub fn new(kind: TopicKind, id: impl Into<String>) -> Result<Topic, TopicError> {
        let id = id.into();
        if !valid_id(&id) {
            return Err(TopicError::BadTopic(format!(
                "metrics.{}.{id}",
                kind.as_str()
            )));
        }
        Ok(Topic { kind, id })
    }

    pub fn node(id: &str) -> Result<Topic, TopicError> {
        Topic::new(TopicKind::Nodes, id)
    }

    pub fn dc(id: &str) -> Result<Topic, TopicError> {
        Topic::new(TopicKind::Dc, id)
    }

    pub fn kind(&self) -> TopicKind {
        self.kind
    }

    pub fn id(&self) -> &str {
        &self.id
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "metrics.{}.{}", self.kind.as_str(), self.id)
    }
}

impl FromStr for Topic {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TopicError::BadTopic(s.to_string());
        let mut parts = s.splitn(3, '.');
        if parts.next() != Some("metrics") {
            return Err(bad());
        }
        let kind = parts.next().and_then(TopicKind::parse).ok_or_else(bad)?;
        let id = parts.next().ok_or_else(bad)?;
        Topic::new(kind, id).map_err(|_| bad())
    }
}

impl TryFrom<String> for Topic {
    type Error = TopicError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Topic> for String {
    fn from(t: Topic) -> String {
        t.to_string()
    }
}

/// `metrics.<kind|*>.<id|*>`; `None` stands for `*`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TopicFilter {
    kind: Option<TopicKind>,
    id: Option<String>,
}

impl TopicFilter {
    pub fn new(kind: Option<TopicKind>, id: Option<String>) -> Result<TopicFilter, TopicError> {
        if let Some(id) = &id {
            if !valid_id(id) {
                return Err(TopicError::BadFilter(id.clone()));
            }
        }
        Ok(TopicFilter { kind, id })
    }

    pub fn exact(topic: &Topic) -> TopicFilter {
        TopicFilter {
            kind: Some(topic.kind),
            id: Some(topic.id.clone()),
        }
    }

    /// Every topic over `ids` this filter accepts.
    pub fn expand(&self, ids: &[&str]) -> Vec<Topic> {
        TopicKind::ALL
            .iter()
            .filter(|k| self.kind.is_none_or(|fk| fk == **k))
            .flat_map(|&k| {
                ids.iter()
                    .filter(|id| self.id.as_deref().is_none_or(|fid| fid == **id))
                    .filter_map(move |id| Topic::new(k, *id).ok())
            })
            .collect()
    }
}

/// True iff every filter segment equals the topic segment or is `*`.
pub fn topic_match(filter: &TopicFilter, topic: &Topic) -> bool {
    filter.kind.is_none_or(|k| k == topic.kind)
        && filter.id.as_deref().is_none_or(|id| id == topic.id)
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = self.kind.map_or("*", TopicKind::as_str);
        let id = self.id.as_deref().unwrap_or("*");
        write!(f, "metrics.{kind}.{id}")
    }
}

impl FromStr for TopicFilter {
    type Err = TopicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TopicError::BadFilter(s.to_string());
        let parts: Vec<&str> = s.split('.').collect();
        let [root, kind, id] = parts.as_slice() else {
            return Err(bad());
        };
        if *root != "metrics" {
            return Err(bad());
        }
        let kind = match *kind {
            "*" => None,
            k => Some(TopicKind::parse(k).ok_or_else(bad)?),
        };
        let id = match *id {
            "*" => None,
            id if valid_id(id) => Some(id.to_string()),
            _ => return Err(bad()),
        };
        Ok(TopicFilter { kind, id })
    }
}

impl TryFrom<String> for TopicFilter {
    type Error = TopicError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TopicFilter> for String {
    fn from(f: TopicFilter) -> String {
        f.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(f: &str, t: &str) -> bool {
        topic_match(&f.parse().unwrap(), &t.parse().unwrap())
    }

    #[test]
    fn dc_exact_and_node_wildcard() {
        assert!(m("metrics.dc.X", "metrics.dc.X"));
        assert!(m("metrics.nodes.*", "metrics.nodes.n7"));
        assert!(!m("metrics.nodes.*", "metrics.dc.n7"));
        assert!(m("metrics.*.x", "metrics.dc.x"));
        assert!(m("metrics.*.x", "metrics.nodes.x"));
        assert!(m("metrics.*.*", "metrics.nodes.q"));
    }

    #[test]
    fn parsing_rejects_malformed() {
        for bad in [
            "metrics.nodes",
            "metrics.nodes.a.b",
            "metric.nodes.a",
            "metrics.vm.a",
            "metrics.nodes.",
            "metrics.nodes.n*",
        ] {
            assert!(bad.parse::<TopicFilter>().is_err(), "{bad}");
        }
        for bad in [
            "metrics.nodes.*",
            "metrics.*.a",
            "metrics.nodes.",
            "metrics.dc",
        ] {
            assert!(bad.parse::<Topic>().is_err(), "{bad}");
        }
        assert!(Topic::node("a.b").is_err());
    }

    #[test]
    fn display_round_trip() {
        for s in ["metrics.nodes.n1", "metrics.dc.d-1"] {
            assert_eq!(s.parse::<Topic>().unwrap().to_string(), s);
        }
        for s in ["metrics.*.*", "metrics.dc.*", "metrics.*.x"] {
            assert_eq!(s.parse::<TopicFilter>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn expand_enumerates_matches() {
        let f: TopicFilter = "metrics.nodes.*".parse().unwrap();
        let got: Vec<String> = f
            .expand(&["a", "b"])
            .iter()
            .map(|t| t.to_string())
            .collect();
        assert_eq!(got, ["metrics.nodes.a", "metrics.nodes.b"]);
    }
}
