//! On-disk segment buffer.
//!
//! Each segment is one file `<seq>.om` holding exposition text. The file
//! `hwm` stores the highest sequence number handed out, so numbering keeps
//! increasing across restarts. Every file is written to a temporary name
//! and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::collector::Level;
use crate::openmetrics::Timestamp;

pub const HWM_FILE: &str = "hwm";
pub const SEGMENT_EXT: &str = "om";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentState {
    Pending,
    InFlight { sent_at: Timestamp },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferSegment {
    pub seq: u64,
    pub created_at: Timestamp,
    pub level: Level,
    pub payload: Vec<u8>,
    pub state: SegmentState,
}

#[derive(Debug)]
pub struct SegmentBuffer {
    dir: PathBuf,
    segments: BTreeMap<u64, BufferSegment>,
    hwm: u64,
    bytes: u64,
    cap: u64,
    fsync: bool,
}

fn write_atomic(path: &Path, data: &[u8], fsync: bool) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(data)?;
        if fsync {
            f.sync_all()?;
        }
    }
    fs::rename(tmp, path)
}

impl SegmentBuffer {
    /// Opens `dir`, reloading every segment left there as pending.
    /// `level_of` recovers the level of a reloaded segment from its payload.
    pub fn open(
        dir: &Path,
        cap: u64,
        fsync: bool,
        level_of: impl Fn(&[u8]) -> Level,
    ) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut hwm = match fs::read_to_string(dir.join(HWM_FILE)) {
            Ok(s) => s
                .trim()
                .parse::<u64>()
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e),
        };
        let mut segments = BTreeMap::new();
        let mut bytes = 0;
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            match path.extension().and_then(|e| e.to_str()) {
                Some("tmp") => {
                    fs::remove_file(&path)?;
                    continue;
                }
                Some(SEGMENT_EXT) => {}
                _ => continue,
            }
            let Some(seq) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u64>().ok())
            else {
                continue;
            };
            let payload = fs::read(&path)?;
            let created_at = fs::metadata(&path)?
                .modified()
                .ok()
                .and_then(|m| m.duration_since(std::time::UNIX_EPOCH).ok())
                .map_or(0, |d| d.as_millis() as Timestamp);
            hwm = hwm.max(seq);
            bytes += payload.len() as u64;
            segments.insert(
                seq,
                BufferSegment {
                    seq,
                    created_at,
                    level: level_of(&payload),
                    payload,
                    state: SegmentState::Pending,
                },
            );
        }
        Ok(SegmentBuffer {
            dir: dir.to_path_buf(),
            segments,
            hwm,
            bytes,
            cap,
            fsync,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hwm(&self) -> u64 {
        self.hwm
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = &BufferSegment> {
        self.segments.values()
    }

    pub fn get(&self, seq: u64) -> Option<&BufferSegment> {
        self.segments.get(&seq)
    }

    fn path_of(&self, seq: u64) -> PathBuf {
        self.dir.join(format!("{seq}.{SEGMENT_EXT}"))
    }

    /// Hands out the next sequence number and persists it.
    pub fn next_seq(&mut self) -> io::Result<u64> {
        let seq = self.hwm + 1;
        write_atomic(
            &self.dir.join(HWM_FILE),
            seq.to_string().as_bytes(),
            self.fsync,
        )?;
        self.hwm = seq;
        Ok(seq)
    }

    /// Stores a new pending segment, evicting older ones while the cap would
    /// be exceeded: pending first, then in-flight, oldest first. A payload
    /// larger than the whole cap is itself returned as evicted.
    pub fn push(
        &mut self,
        level: Level,
        created_at: Timestamp,
        payload: Vec<u8>,
    ) -> io::Result<(Option<u64>, Vec<BufferSegment>)> {
        let size = payload.len() as u64;
        let seq = self.next_seq()?;
        let segment = BufferSegment {
            seq,
            created_at,
            level,
            payload,
            state: SegmentState::Pending,
        };
        if size > self.cap {
            return Ok((None, vec![segment]));
        }
        let mut evicted = Vec::new();
        while self.bytes + size > self.cap {
            let victim = self
                .segments
                .values()
                .find(|s| s.state == SegmentState::Pending)
                .or_else(|| self.segments.values().next())
                .map(|s| s.seq)
                .expect("bytes > 0 implies a segment");
            evicted.push(self.remove(victim)?.expect("victim exists"));
        }
        write_atomic(&self.path_of(seq), &segment.payload, self.fsync)?;
        self.bytes += size;
        self.segments.insert(seq, segment);
        Ok((Some(seq), evicted))
    }

    pub fn remove(&mut self, seq: u64) -> io::Result<Option<BufferSegment>> {
        let Some(seg) = self.segments.remove(&seq) else {
            return Ok(None);
        };
        match fs::remove_file(self.path_of(seq)) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => {
                self.segments.insert(seq, seg);
                return Err(e);
            }
        }
        self.bytes -= seg.payload.len() as u64;
        Ok(Some(seg))
    }

    pub fn mark_in_flight(&mut self, seq: u64, sent_at: Timestamp) {
        if let Some(s) = self.segments.get_mut(&seq) {
            s.state = SegmentState::InFlight { sent_at };
        }
    }
}
