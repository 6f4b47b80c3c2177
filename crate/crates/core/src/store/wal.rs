//! Append-only log of point batches.
//!
//! ```text
//! +-----------------+--------------------------------+
//! | 4 bytes, BE u32 | n bytes                        |
//! +-----------------+--------------------------------+
//! | n               | JSON array of StoredPoint      |
//! +-----------------+--------------------------------+
//! ```
//!
//! A record cut short by a crash is discarded on open and the file is
//! truncated back to the last complete record.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use super::{StoreError, StoredPoint};

pub const WAL_FILE: &str = "store.wal";

#[derive(Debug)]
pub struct Wal {
    path: PathBuf,
    file: File,
    sync: bool,
}

pub fn encode_record(points: &[StoredPoint]) -> Vec<u8> {
    let body = serde_json::to_vec(points).expect("stored points serialize");
    let mut rec = Vec::with_capacity(body.len() + 4);
    rec.extend_from_slice(&(body.len() as u32).to_be_bytes());
    rec.extend_from_slice(&body);
    rec
}

impl Wal {
    /// Opens (creating if needed) the log in `dir` and returns every batch it
    /// holds, in append order.
    pub fn open(dir: &Path, sync: bool) -> Result<(Wal, Vec<Vec<StoredPoint>>), StoreError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(WAL_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;

        let mut batches = Vec::new();
        let mut offset = 0usize;
        while buf.len() - offset >= 4 {
            let len = u32::from_be_bytes(buf[offset..offset + 4].try_into().unwrap()) as usize;
            let end = offset + 4 + len;
            if end > buf.len() {
                break;
            }
            match serde_json::from_slice::<Vec<StoredPoint>>(&buf[offset + 4..end]) {
                Ok(points) => batches.push(points),
                Err(e) if end == buf.len() => {
                    log::warn!("discarding unreadable final WAL record: {e}");
                    break;
                }
                Err(e) => {
                    return Err(StoreError::Corrupt(format!(
                        "record at offset {offset}: {e}"
                    )))
                }
            }
            offset = end;
        }
        if offset != buf.len() {
            log::warn!("truncating {} trailing WAL bytes", buf.len() - offset);
            file.set_len(offset as u64)?;
            file.sync_all()?;
        }
        Ok((Wal { path, file, sync }, batches))
    }

    pub fn append(&mut self, record: &[u8]) -> io::Result<()> {
        self.file.write_all(record)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    /// Replaces the log with a single record holding `points`.
    pub fn rewrite(&mut self, points: &[StoredPoint]) -> io::Result<()> {
        let tmp = self.path.with_extension("wal.tmp");
        {
            let mut f = File::create(&tmp)?;
            if !points.is_empty() {
                f.write_all(&encode_record(points))?;
            }
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new()
            .read(true)
            .append(true)
            .open(&self.path)?;
        Ok(())
    }
}
