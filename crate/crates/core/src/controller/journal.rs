//! Append-only record log backing the controller's state.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ChunkKey, EnrichmentSource, GridHour, Loan, Project, Scooter, ScooterConfig, ScooterId,
    Timestamp, Trip, TripChunk, TripId, User,
};
use crate::protocol::Heartbeat;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("storage io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub chunk_key: ChunkKey,
    pub digest: String,
    pub reason: String,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Scooter(Scooter),
    Config(ScooterConfig),
    Chunk(TripChunk),
    Quarantine(QuarantineEntry),
    Finalize {
        scooter_id: ScooterId,
        trip_id: TripId,
        chunk_count: u32,
    },
    TripQuarantined {
        scooter_id: ScooterId,
        trip_id: TripId,
        reason: String,
    },
    Trip(Trip),
    EnrichmentAttempts {
        trip_id: TripId,
        attempts: Vec<(EnrichmentSource, GridHour, u32)>,
    },
    Loan(Loan),
    User(User),
    Project(Project),
    Heartbeat {
        scooter_id: ScooterId,
        heartbeat: Heartbeat,
        at: Timestamp,
    },
    ConfigAnomaly {
        scooter_id: ScooterId,
        client_version: u64,
    },
}

/// Durable storage for controller records.
pub trait Journal: Send {
    fn append(&mut self, record: &Record) -> Result<(), StorageError>;
    fn replay(&mut self) -> Result<Vec<Record>, StorageError>;
    fn flush(&mut self) -> Result<(), StorageError>;
}

/// JSON-lines file; a torn trailing line from a crash is discarded on replay.
pub struct FileJournal {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl FileJournal {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StorageError> {
        fs::create_dir_all(dir.as_ref())?;
        let path = dir.as_ref().join("journal.jsonl");
        if let Ok(bytes) = fs::read(&path) {
            if bytes.last().is_some_and(|&b| b != b'\n') {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                OpenOptions::new().write(true).open(&path)?.set_len(keep as u64)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            writer: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Journal for FileJournal {
    fn append(&mut self, record: &Record) -> Result<(), StorageError> {
        let mut line = serde_json::to_vec(record).expect("records serialize");
        line.push(b'\n');
        self.writer.write_all(&line)?;
        self.writer.flush()?;
        Ok(())
    }

    fn replay(&mut self) -> Result<Vec<Record>, StorageError> {
        self.writer.flush()?;
        let reader = BufReader::new(File::open(&self.path)?);
        let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(lines.len());
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(r) => out.push(r),
                Err(_) if i == last => break,
                Err(e) => {
                    return Err(StorageError::Corrupt {
                        line: i + 1,
                        reason: e.to_string(),
                    })
                }
            }
        }
        Ok(out)
    }

    fn flush(&mut self) -> Result<(), StorageError> {
        self.writer.flush()?;
        self.writer.get_ref().sync_all()?;
        Ok(())
    }
}

/// Shared in-memory record list; clones see the same records.
#[derive(Clone, Default)]
pub struct MemoryJournal {
    records: Arc<Mutex<Vec<Record>>>,
}

impl MemoryJournal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record counts by tag, for tests.
    pub fn tally(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in self.records.lock().unwrap().iter() {
            let v = serde_json::to_value(r).unwrap();
            let tag = v["record"].as_str().unwrap_or_default().to_owned();
            *out.entry(tag).or_default() += 1;
        }
        out
    }
}

impl Journal for MemoryJournal {
    fn append(&mut self, record: &Record) -> Result<(), StorageError> {
        self.records.lock().unwrap().push(record.clone());
        Ok(())
    }

    fn replay(&mut self) -> Result<Vec<Record>, StorageError> {
        Ok(self.records.lock().unwrap().clone())
    }

    fn flush(&mut self) -> Result<(), StorageError> {
        Ok(())
    }
}

/// Keeps nothing; for throwaway controllers in simulations.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullJournal;

impl Journal for NullJournal {
    fn append(&mut self, _record: &Record) -> Result<(), StorageError> {
        Ok(())
    }

    fn replay(&mut self) -> Result<Vec<Record>, StorageError> {
        Ok(Vec::new())
    }

    fn flush(&mut self) -> Result<(), StorageError> {
        Ok(())
    }
}
