//! Control-plane messages and their socket encoding.
//!
//! A frame is a 4-byte big-endian length followed by a JSON envelope:
//!
//! ```text
//! {"version":1,"kind":"pong","sender":"n1","seq":7,"payload":"<base64>"}
//! ```
//!
//! Payload bodies before base64:
//!
//! | kind                  | body                                              |
//! |-----------------------|---------------------------------------------------|
//! | ping                  | empty                                             |
//! | pong                  | JSON batch, expositions as OpenMetrics text       |
//! | register_node         | `{"dc_id":..,"address":..}`                       |
//! | ack                   | JSON [`Ack`]                                      |
//! | app_target_add        | `{"app_id":..,"address":..}`                      |
//! | app_target_remove     | `{"target_id":..}`                                |
//! | publish               | topic, `\n`, exposition bytes                     |
//! | subscribe/unsubscribe | filter text                                       |

use std::io::{self, Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::collector::Level;
use crate::openmetrics::{parse_exposition, serialize_exposition, CodecError, Exposition};
use crate::topic::{Topic, TopicFilter};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 7070;
/// Frames larger than this are refused.
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("bad envelope: {0}")]
    Envelope(String),
    #[error("bad {kind} payload: {reason}")]
    Payload { kind: &'static str, reason: String },
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Metrics piggybacked on a pong.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsBatch {
    pub node_id: String,
    pub dc_id: String,
    pub batch_seq: u64,
    pub expositions: Vec<(Level, Exposition)>,
    /// Agent counters; stored under node scope.
    pub self_metrics: Exposition,
    /// Buffer segments whose samples the batch carries.
    pub segments: Vec<u64>,
}

impl MetricsBatch {
    pub fn sample_count(&self) -> usize {
        self.expositions
            .iter()
            .map(|(_, e)| e.sample_count())
            .sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ack {
    /// Every sample of the batch is persisted.
    Batch(u64),
    Registered,
    TargetAdded(String),
    TargetRemoved,
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Ping,
    Pong(MetricsBatch),
    RegisterNode {
        dc_id: String,
        address: Option<String>,
    },
    Ack(Ack),
    AppTargetAdd {
        app_id: String,
        address: String,
    },
    AppTargetRemove {
        target_id: String,
    },
    Publish {
        topic: Topic,
        data: Vec<u8>,
    },
    Subscribe(TopicFilter),
    Unsubscribe(TopicFilter),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Ping => "ping",
            Payload::Pong(_) => "pong",
            Payload::RegisterNode { .. } => "register_node",
            Payload::Ack(_) => "ack",
            Payload::AppTargetAdd { .. } => "app_target_add",
            Payload::AppTargetRemove { .. } => "app_target_remove",
            Payload::Publish { .. } => "publish",
            Payload::Subscribe(_) => "subscribe",
            Payload::Unsubscribe(_) => "unsubscribe",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub version: u32,
    pub sender: String,
    pub seq: u64,
    pub payload: Payload,
}

impl Envelope {
    pub fn new(sender: impl Into<String>, seq: u64, payload: Payload) -> Self {
        Envelope {
            version: PROTOCOL_VERSION,
            sender: sender.into(),
            seq,
            payload,
        }
    }

    pub fn kind(&self) -> &'static str {
        self.payload.kind()
    }
}

#[derive(Serialize, Deserialize)]
struct RawEnvelope {
    version: u32,
    kind: String,
    sender: String,
    seq: u64,
    payload: String,
}

#[derive(Serialize, Deserialize)]
struct RawBatch {
    node_id: String,
    dc_id: String,
    batch_seq: u64,
    expositions: Vec<RawLevelExposition>,
    self_metrics: String,
    #[serde(default)]
    segments: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct RawLevelExposition {
    level: Level,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct RawRegister {
    dc_id: String,
    #[serde(default)]
    address: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawTargetAdd {
    app_id: String,
    address: String,
}

#[derive(Serialize, Deserialize)]
struct RawTargetRemove {
    target_id: String,
}

fn codec_err(kind: &'static str) -> impl Fn(CodecError) -> WireError {
    move |e| WireError::Payload {
        kind,
        reason: e.to_string(),
    }
}

fn json_err(kind: &'static str) -> impl Fn(serde_json::Error) -> WireError {
    move |e| WireError::Payload {
        kind,
        reason: e.to_string(),
    }
}

fn encode_body(payload: &Payload) -> Result<Vec<u8>, WireError> {
    let kind = payload.kind();
    let json = |v: serde_json::Result<Vec<u8>>| v.map_err(json_err(kind));
    match payload {
        Payload::Ping => Ok(Vec::new()),
        Payload::Pong(b) => {
            let expositions = b
                .expositions
                .iter()
                .map(|(level, e)| {
                    Ok(RawLevelExposition {
                        level: *level,
                        text: serialize_exposition(e)?,
                    })
                })
                .collect::<Result<Vec<_>, CodecError>>()
                .map_err(codec_err(kind))?;
            let raw = RawBatch {
                node_id: b.node_id.clone(),
                dc_id: b.dc_id.clone(),
                batch_seq: b.batch_seq,
                expositions,
                self_metrics: serialize_exposition(&b.self_metrics).map_err(codec_err(kind))?,
                segments: b.segments.clone(),
            };
            json(serde_json::to_vec(&raw))
        }
        Payload::RegisterNode { dc_id, address } => json(serde_json::to_vec(&RawRegister {
            dc_id: dc_id.clone(),
            address: address.clone(),
        })),
        Payload::Ack(a) => json(serde_json::to_vec(a)),
        Payload::AppTargetAdd { app_id, address } => json(serde_json::to_vec(&RawTargetAdd {
            app_id: app_id.clone(),
            address: address.clone(),
        })),
        Payload::AppTargetRemove { target_id } => json(serde_json::to_vec(&RawTargetRemove {
            target_id: target_id.clone(),
        })),
        Payload::Publish { topic, data } => {
            let mut out = topic.to_string().into_bytes();
            out.push(b'\n');
            out.extend_from_slice(data);
            Ok(out)
        }
        Payload::Subscribe(f) | Payload::Unsubscribe(f) => Ok(f.to_string().into_bytes()),
    }
}

fn decode_body(kind: &str, body: &[u8]) -> Result<Payload, WireError> {
    fn text<'a>(kind: &'static str, body: &'a [u8]) -> Result<&'a str, WireError> {
        std::str::from_utf8(body).map_err(|e| WireError::Payload {
            kind,
            reason: e.to_string(),
        })
    }
    fn bad(kind: &'static str, reason: impl ToString) -> WireError {
        WireError::Payload {
            kind,
            reason: reason.to_string(),
        }
    }
    Ok(match kind {
        "ping" => Payload::Ping,
        "pong" => {
            let raw: RawBatch = serde_json::from_slice(body).map_err(json_err("pong"))?;
            let expositions = raw
                .expositions
                .into_iter()
                .map(|r| Ok((r.level, parse_exposition(&r.text)?)))
                .collect::<Result<Vec<_>, CodecError>>()
                .map_err(codec_err("pong"))?;
            Payload::Pong(MetricsBatch {
                node_id: raw.node_id,
                dc_id: raw.dc_id,
                batch_seq: raw.batch_seq,
                expositions,
                self_metrics: parse_exposition(&raw.self_metrics).map_err(codec_err("pong"))?,
                segments: raw.segments,
            })
        }
        "register_node" => {
            let raw: RawRegister =
                serde_json::from_slice(body).map_err(json_err("register_node"))?;
            Payload::RegisterNode {
                dc_id: raw.dc_id,
                address: raw.address,
            }
        }
        "ack" => Payload::Ack(serde_json::from_slice(body).map_err(json_err("ack"))?),
        "app_target_add" => {
            let raw: RawTargetAdd =
                serde_json::from_slice(body).map_err(json_err("app_target_add"))?;
            Payload::AppTargetAdd {
                app_id: raw.app_id,
                address: raw.address,
            }
        }
        "app_target_remove" => {
            let raw: RawTargetRemove =
                serde_json::from_slice(body).map_err(json_err("app_target_remove"))?;
            Payload::AppTargetRemove {
                target_id: raw.target_id,
            }
        }
        "publish" => {
            let nl = body
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("publish", "missing topic line"))?;
            let topic = text("publish", &body[..nl])?
                .parse()
                .map_err(|e| bad("publish", e))?;
            Payload::Publish {
                topic,
                data: body[nl + 1..].to_vec(),
            }
        }
        "subscribe" => Payload::Subscribe(
            text("subscribe", body)?
                .parse()
                .map_err(|e| bad("subscribe", e))?,
        ),
        "unsubscribe" => Payload::Unsubscribe(
            text("unsubscribe", body)?
                .parse()
                .map_err(|e| bad("unsubscribe", e))?,
        ),
        other => return Err(WireError::Envelope(format!("unknown kind `{other}`"))),
    })
}

/// JSON form of an envelope, without the length prefix.
pub fn encode_envelope(env: &Envelope) -> Result<Vec<u8>, WireError> {
    let raw = RawEnvelope {
        version: env.version,
        kind: env.kind().to_string(),
        sender: env.sender.clone(),
        seq: env.seq,
        payload: B64.encode(encode_body(&env.payload)?),
    };
    serde_json::to_vec(&raw).map_err(|e| WireError::Envelope(e.to_string()))
}

pub fn decode_envelope(bytes: &[u8]) -> Result<Envelope, WireError> {
    let raw: RawEnvelope =
        serde_json::from_slice(bytes).map_err(|e| WireError::Envelope(e.to_string()))?;
    if raw.version != PROTOCOL_VERSION {
        return Err(WireError::Version(raw.version));
    }
    let body = B64
        .decode(raw.payload.as_bytes())
        .map_err(|e| WireError::Envelope(e.to_string()))?;
    Ok(Envelope {
        version: raw.version,
        sender: raw.sender,
        seq: raw.seq,
        payload: decode_body(&raw.kind, &body)?,
    })
}

/// Length-prefixed frame.
pub fn encode_frame(env: &Envelope) -> Result<Vec<u8>, WireError> {
    let body = encode_envelope(env)?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(WireError::TooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn write_frame<W: Write>(w: &mut W, env: &Envelope) -> Result<(), WireError> {
    w.write_all(&encode_frame(env)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Envelope>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(WireError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_envelope(&body).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::openmetrics::{LabelSet, MetricFamily, MetricType, Sample};

    fn batch() -> MetricsBatch {
        let labels = LabelSet::from_pairs([("node", "n1")]).unwrap();
        let fam = MetricFamily::new("machine_cpu_cores", MetricType::Gauge)
            .with_sample(Sample::new(labels.clone(), 8.0, 1000));
        let own =
            MetricFamily::new("agent_scrape_failures", MetricType::Counter).with_sample(Sample {
                suffix: "_total".into(),
                ..Sample::new(labels, 0.0, 1000)
            });
        MetricsBatch {
            node_id: "n1".into(),
            dc_id: "d1".into(),
            batch_seq: 4,
            expositions: vec![(
                Level::Machine,
                Exposition {
                    families: vec![fam],
                },
            )],
            self_metrics: Exposition {
                families: vec![own],
            },
            segments: vec![2, 3],
        }
    }

    fn all_payloads() -> Vec<Payload> {
        vec![
            Payload::Ping,
            Payload::Pong(batch()),
            Payload::RegisterNode {
                dc_id: "d1".into(),
                address: Some("10.0.0.1:9100".into()),
            },
            Payload::Ack(Ack::Batch(9)),
            Payload::Ack(Ack::TargetAdded("app-1".into())),
            Payload::AppTargetAdd {
                app_id: "web".into(),
                address: "inproc://web".into(),
            },
            Payload::AppTargetRemove {
                target_id: "app-1".into(),
            },
            Payload::Publish {
                topic: Topic::dc("d1").unwrap(),
                data: b"# EOF\n".to_vec(),
            },
            Payload::Subscribe("metrics.nodes.*".parse().unwrap()),
            Payload::Unsubscribe("metrics.*.x".parse().unwrap()),
        ]
    }

    #[test]
    fn frames_round_trip() {
        for (i, p) in all_payloads().into_iter().enumerate() {
            let env = Envelope::new("cp", i as u64, p);
            let frame = encode_frame(&env).unwrap();
            assert_eq!(
                u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize,
                frame.len() - 4
            );
            let back = read_frame(&mut &frame[..]).unwrap().unwrap();
            assert_eq!(back, env);
        }
    }

    #[test]
    fn envelope_json_shape() {
        let env = Envelope::new("cp", 3, Payload::Ping);
        let v: serde_json::Value = serde_json::from_slice(&encode_envelope(&env).unwrap()).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["kind"], "ping");
        assert_eq!(v["sender"], "cp");
        assert_eq!(v["seq"], 3);
        assert_eq!(v["payload"], "");
    }

    #[test]
    fn rejects_bad_frames() {
        let bad_version = br#"{"version":2,"kind":"ping","sender":"a","seq":1,"payload":""}"#;
        assert!(matches!(
            decode_envelope(bad_version),
            Err(WireError::Version(2))
        ));
        let bad_kind = br#"{"version":1,"kind":"shout","sender":"a","seq":1,"payload":""}"#;
        assert!(decode_envelope(bad_kind).is_err());
        assert!(read_frame(&mut &[0u8, 0][..]).unwrap().is_none());
        let huge = (u32::MAX).to_be_bytes();
        assert!(matches!(
            read_frame(&mut &huge[..]),
            Err(WireError::TooLarge(_))
        ));
    }
}
