//! Append-only event log with content-addressed payloads.
//!
//! `journal.log` holds one `<timestamp>;<event>;<sha256 hex>` line per
//! state transition; the payload lives in `objects/<sha256 hex>`.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::warn;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt journal line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("payload {0} is missing")]
    MissingObject(String),
    #[error("payload {0} does not match its hash")]
    HashMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalEntry {
    pub ts: u64,
    pub event: String,
    pub hash: String,
    pub payload: Vec<u8>,
}

pub fn payload_hash(payload: &[u8]) -> String {
    hex::encode(Sha256::digest(payload))
}

#[derive(Debug)]
pub struct Journal {
    dir: PathBuf,
    log: File,
}

impl Journal {
    pub fn open(dir: &Path) -> Result<Journal, JournalError> {
        fs::create_dir_all(dir.join("objects"))?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("journal.log"))?;
        Ok(Journal {
            dir: dir.to_path_buf(),
            log,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&mut self, ts: u64, event: &str, payload: &[u8]) -> Result<String, JournalError> {
        if event.is_empty() || event.contains([';', '\n']) {
            return Err(JournalError::Corrupt {
                line: 0,
                reason: format!("bad event name {event:?}"),
            });
        }
        let hash = payload_hash(payload);
        let obj = self.dir.join("objects").join(&hash);
        if !obj.exists() {
            let tmp = obj.with_extension("tmp");
            fs::write(&tmp, payload)?;
            fs::rename(&tmp, &obj)?;
        }
        writeln!(self.log, "{ts};{event};{hash}")?;
        self.log.sync_data()?;
        Ok(hash)
    }

    /// All complete entries in order. A torn final line is skipped.
    pub fn entries(&self) -> Result<Vec<JournalEntry>, JournalError> {
        let text = fs::read_to_string(self.dir.join("journal.log"))?;
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        if complete.len() != text.len() {
            warn!("ignoring torn journal tail in {}", self.dir.display());
        }
        let mut out = Vec::new();
        for (i, line) in complete.lines().enumerate() {
            let corrupt = |reason: &str| JournalError::Corrupt {
                line: i + 1,
                reason: reason.to_string(),
            };
            let mut parts = line.split(';');
            let (Some(ts), Some(event), Some(hash), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(corrupt("expected three fields"));
            };
            let ts = ts.parse().map_err(|_| corrupt("bad timestamp"))?;
            let payload = fs::read(self.dir.join("objects").join(hash)).map_err(|e| match e.kind() {
                io::ErrorKind::NotFound => JournalError::MissingObject(hash.to_string()),
                _ => JournalError::Io(e),
            })?;
            if payload_hash(&payload) != hash {
                return Err(JournalError::HashMismatch(hash.to_string()));
            }
            out.push(JournalEntry {
                ts,
                event: event.to_string(),
                hash: hash.to_string(),
                payload,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appends_and_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut j = Journal::open(dir.path()).unwrap();
        j.append(5, "confirm", b"contract=a").unwrap();
        j.append(9, "delete", b"contract=a").unwrap();
        let text = fs::read_to_string(dir.path().join("journal.log")).unwrap();
        let h = payload_hash(b"contract=a");
        assert_eq!(text, format!("5;confirm;{h}\n9;delete;{h}\n"));
        let again = Journal::open(dir.path()).unwrap();
        let entries = again.entries().unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].event, "delete");
        assert_eq!(entries[1].payload, b"contract=a");
    }

    #[test]
    fn detects_tampering_and_skips_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let mut j = Journal::open(dir.path()).unwrap();
        let h = j.append(1, "tick", b"x").unwrap();
        let mut f = OpenOptions::new().append(true).open(dir.path().join("journal.log")).unwrap();
        write!(f, "2;tick;abc").unwrap();
        assert_eq!(j.entries().unwrap().len(), 1);
        fs::write(dir.path().join("objects").join(&h), b"y").unwrap();
        assert!(matches!(j.entries(), Err(JournalError::HashMismatch(_))));
    }
}
