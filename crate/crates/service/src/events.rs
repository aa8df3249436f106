//! Append-only event log and snapshot files.
//!
//! Data directory layout:
//!
//! ```text
//! <data-dir>/lock                      advisory lock held while open
//! <data-dir>/events.jsonl              one EventLogRecord per line
//! <data-dir>/snapshots/<seq>.json      full state as of event <seq>
//! <data-dir>/imports/<seq>-registry.toml  registry documents as received
//! ```
//!
//! Sequence numbers start at 1 and increase by exactly one per line. Every
//! record carries a SHA-256 checksum over its sequence number, kind and
//! canonical payload, so a torn or edited line is detected on open and the
//! service refuses to start.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const IMPORT_DIR: &str = "imports";
const LOCK_FILE: &str = "lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    RegistryLoaded,
    BatchApplied,
    QuestionResult,
    PlanCreated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogRecord {
    pub seq: u64,
    pub kind: EventKind,
    pub received_at: DateTime<Utc>,
    pub payload: serde_json::Value,
    pub checksum: String,
}

impl EventLogRecord {
    pub fn new(seq: u64, kind: EventKind, received_at: DateTime<Utc>, payload: serde_json::Value) -> Self {
        let checksum = checksum(seq, kind, &payload);
        EventLogRecord {
            seq,
            kind,
            received_at,
            payload,
            checksum,
        }
    }

    pub fn verify(&self) -> bool {
        checksum(self.seq, self.kind, &self.payload) == self.checksum
    }
}

fn checksum(seq: u64, kind: EventKind, payload: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(seq.to_le_bytes());
    h.update(serde_json::to_vec(&kind).expect("kind serializes"));
    h.update(serde_json::to_vec(payload).expect("payload serializes"));
    hex::encode(h.finalize())
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("event log is corrupt at line {line}; last valid sequence is {last_valid_seq}: {reason}")]
    Corrupt {
        last_valid_seq: u64,
        line: usize,
        reason: String,
    },
    #[error("data directory {0} is in use by another process")]
    Locked(PathBuf),
}

impl LogError {
    pub fn code(&self) -> &'static str {
        match self {
            LogError::Io { .. } => "io-error",
            LogError::Corrupt { .. } => "corrupt-log",
            LogError::Locked(_) => "data-dir-locked",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), LogError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// An open, locked event log.
#[derive(Debug)]
pub struct EventLog {
    dir: PathBuf,
    file: File,
    last_seq: u64,
    _lock: File,
}

impl EventLog {
    /// Opens (creating if needed) the log in `dir`, returning it together
    /// with every record already present.
    pub fn open(dir: &Path) -> Result<(Self, Vec<EventLogRecord>), LogError> {
        fs::create_dir_all(dir.join(SNAPSHOT_DIR)).map_err(io_err(dir))?;
        fs::create_dir_all(dir.join(IMPORT_DIR)).map_err(io_err(dir))?;
        let lock_path = dir.join(LOCK_FILE);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        if lock.try_lock().is_err() {
            return Err(LogError::Locked(dir.to_owned()));
        }

        let path = dir.join(EVENTS_FILE);
        let records = if path.exists() { read_records(&path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let last_seq = records.last().map_or(0, |r| r.seq);
        Ok((
            EventLog {
                dir: dir.to_owned(),
                file,
                last_seq,
                _lock: lock,
            },
            records,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Appends records for `events` and syncs once. Returns the records.
    pub fn append(
        &mut self,
        events: impl IntoIterator<Item = (EventKind, serde_json::Value)>,
        received_at: DateTime<Utc>,
    ) -> Result<Vec<EventLogRecord>, LogError> {
        let path = self.dir.join(EVENTS_FILE);
        let mut buf = Vec::new();
        let mut records = Vec::new();
        let mut seq = self.last_seq;
        for (kind, payload) in events {
            seq += 1;
            let record = EventLogRecord::new(seq, kind, received_at, payload);
            serde_json::to_writer(&mut buf, &record).expect("records serialize");
            buf.push(b'\n');
            records.push(record);
        }
        if records.is_empty() {
            return Ok(records);
        }
        self.file.write_all(&buf).map_err(io_err(&path))?;
        self.file.sync_data().map_err(io_err(&path))?;
        self.last_seq = seq;
        Ok(records)
    }

    pub fn snapshot_path(&self, seq: u64) -> PathBuf {
        self.dir.join(SNAPSHOT_DIR).join(format!("{seq:012}.json"))
    }

    /// Snapshot sequence numbers on disk, newest first.
    pub fn snapshots(&self) -> Vec<u64> {
        let mut seqs: Vec<u64> = fs::read_dir(self.dir.join(SNAPSHOT_DIR))
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".json")?.parse().ok()
            })
            .collect();
        seqs.sort_unstable_by(|a, b| b.cmp(a));
        seqs
    }

    /// Removes all but the newest `keep` snapshots.
    pub fn prune_snapshots(&self, keep: usize) {
        for seq in self.snapshots().into_iter().skip(keep) {
            let _ = fs::remove_file(self.snapshot_path(seq));
        }
    }

    pub fn import_path(&self, seq: u64, name: &str) -> PathBuf {
        self.dir.join(IMPORT_DIR).join(format!("{seq:012}-{name}"))
    }
}

/// Reads and verifies every record in `path`.
pub fn read_records(path: &Path) -> Result<Vec<EventLogRecord>, LogError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records: Vec<EventLogRecord> = Vec::new();
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut number = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(io_err(path))?;
        if read == 0 {
            break;
        }
        number += 1;
        let last_valid_seq = records.last().map_or(0, |r| r.seq);
        let corrupt = |reason: String| LogError::Corrupt {
            last_valid_seq,
            line: number,
            reason,
        };
        if !line.ends_with('\n') {
            return Err(corrupt("truncated record".into()));
        }
        let record: EventLogRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        if record.seq != last_valid_seq + 1 {
            return Err(corrupt(format!("expected sequence {}, found {}", last_valid_seq + 1, record.seq)));
        }
        if !record.verify() {
            return Err(corrupt("checksum mismatch".into()));
        }
        records.push(record);
    }
    Ok(records)
}
