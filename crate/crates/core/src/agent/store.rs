//! Durable node storage: agent state, the open-buffer journal, per-trip
//! outbox files and their ack ledgers.
//!
//! On-disk layout of [`FileStore`]:
//!
//! ```text
//! state.json              agent state, replaced atomically
//! open.jsonl              journal header line, then one sample per line
//! outbox/<trip>.jsonl     one canonical chunk per line
//! outbox/<trip>.ack       acked seq numbers, one per line
//! outbox/<trip>.fin       finalize marker
//! quarantine/<trip>-<seq>.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ScooterConfig, SensorSample, Timestamp, TripChunk, TripId};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record in {file}: {source}")]
    Corrupt {
        file: String,
        source: serde_json::Error,
    },
}

/// Trip currently being recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenTrip {
    pub trip_id: TripId,
    pub started_at: Timestamp,
    pub config_version: u64,
    pub next_seq: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PersistedState {
    pub trip_counter: u64,
    pub current_trip: Option<OpenTrip>,
    pub active_config: Option<ScooterConfig>,
    pub pending_config: Option<ScooterConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalHeader {
    pub trip_id: TripId,
    pub seq: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizeMarker {
    pub trip_id: TripId,
    pub chunk_count: u32,
    pub ended_at: Timestamp,
    pub acked: bool,
}

/// Everything found in storage when an agent starts.
#[derive(Debug, Default)]
pub struct Recovered {
    pub state: Option<PersistedState>,
    pub chunks: Vec<TripChunk>,
    pub acked: BTreeSet<(TripId, u32)>,
    pub finalize: BTreeMap<TripId, FinalizeMarker>,
    pub journal: Option<(JournalHeader, Vec<SensorSample>)>,
}

pub trait AgentStore: Send {
    fn load(&mut self) -> Result<Recovered, StoreError>;
    fn save_state(&mut self, state: &PersistedState) -> Result<(), StoreError>;
    /// Appends samples to the open-buffer journal, writing `header` first if
    /// the journal is empty.
    fn journal_append(&mut self, header: &JournalHeader, samples: &[SensorSample]) -> Result<(), StoreError>;
    fn journal_clear(&mut self) -> Result<(), StoreError>;
    fn append_chunk(&mut self, chunk: &TripChunk) -> Result<(), StoreError>;
    fn mark_acked(&mut self, trip_id: &TripId, seq: u32) -> Result<(), StoreError>;
    fn write_finalize(&mut self, marker: &FinalizeMarker) -> Result<(), StoreError>;
    /// Rewrites a trip's outbox keeping only `keep`.
    fn rewrite_trip(&mut self, trip_id: &TripId, keep: &[TripChunk]) -> Result<(), StoreError>;
    /// Deletes every file belonging to a trip.
    fn prune_trip(&mut self, trip_id: &TripId) -> Result<(), StoreError>;
    fn quarantine(&mut self, chunk: &TripChunk) -> Result<(), StoreError>;
    /// Bytes held by outbox chunk files.
    fn used_bytes(&self) -> u64;
}

fn chunk_line(chunk: &TripChunk) -> String {
    let mut line = chunk.canonical_json();
    line.push('\n');
    line
}

/// Directory-backed store.
pub struct FileStore {
    root: PathBuf,
    journal: Option<BufWriter<File>>,
    journal_has_header: bool,
    used: BTreeMap<TripId, u64>,
}

impl FileStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("outbox"))?;
        fs::create_dir_all(root.join("quarantine"))?;
        Ok(Self {
            root,
            journal: None,
            journal_has_header: false,
            used: BTreeMap::new(),
        })
    }

    fn trip_path(&self, trip_id: &TripId, ext: &str) -> PathBuf {
        self.root.join("outbox").join(format!("{trip_id}.{ext}"))
    }

    fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), StoreError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(contents)?;
            f.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    fn read_lines(path: &Path) -> Result<Vec<String>, StoreError> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        let reader = BufReader::new(File::open(path)?);
        let mut lines = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                lines.push(line);
            }
        }
        Ok(lines)
    }

    fn parse<T: for<'de> Deserialize<'de>>(path: &Path, line: &str) -> Result<T, StoreError> {
        serde_json::from_str(line).map_err(|source| StoreError::Corrupt {
            file: path.display().to_string(),
            source,
        })
    }
}

impl AgentStore for FileStore {
    fn load(&mut self) -> Result<Recovered, StoreError> {
        let mut rec = Recovered::default();
        let state_path = self.root.join("state.json");
        if state_path.exists() {
            let text = fs::read_to_string(&state_path)?;
            rec.state = Some(Self::parse(&state_path, &text)?);
        }
        let journal_path = self.root.join("open.jsonl");
        let lines = Self::read_lines(&journal_path)?;
        if let Some((head, rest)) = lines.split_first() {
            let header: JournalHeader = Self::parse(&journal_path, head)?;
            let samples = rest
                .iter()
                .map(|l| Self::parse(&journal_path, l))
                .collect::<Result<Vec<SensorSample>, _>>()?;
            rec.journal = Some((header, samples));
        }
        self.used.clear();
        let mut entries: Vec<_> = fs::read_dir(self.root.join("outbox"))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .collect();
        entries.sort();
        for path in entries {
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let trip_id = TripId::new(stem);
            match path.extension().and_then(|e| e.to_str()) {
                Some("jsonl") => {
                    let mut bytes = 0;
                    for line in Self::read_lines(&path)? {
                        bytes += line.len() as u64 + 1;
                        rec.chunks.push(Self::parse(&path, &line)?);
                    }
                    self.used.insert(trip_id, bytes);
                }
                Some("ack") => {
                    for line in Self::read_lines(&path)? {
                        let seq: u32 = Self::parse(&path, &line)?;
                        rec.acked.insert((trip_id.clone(), seq));
                    }
                }
                Some("fin") => {
                    let text = fs::read_to_string(&path)?;
                    let marker: FinalizeMarker = Self::parse(&path, &text)?;
                    rec.finalize.insert(trip_id, marker);
                }
                _ => {}
            }
        }
        Ok(rec)
    }

    fn save_state(&mut self, state: &PersistedState) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec(state).expect("state serialization is infallible");
        Self::write_atomic(&self.root.join("state.json"), &bytes)
    }

    fn journal_append(&mut self, header: &JournalHeader, samples: &[SensorSample]) -> Result<(), StoreError> {
        if self.journal.is_none() {
            let path = self.root.join("open.jsonl");
            let has_content = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
            let file = OpenOptions::new().create(true).append(true).open(path)?;
            self.journal = Some(BufWriter::new(file));
            self.journal_has_header = has_content;
        }
        let w = self.journal.as_mut().expect("journal opened above");
        if !self.journal_has_header {
            serde_json::to_writer(&mut *w, header).expect("header serialization is infallible");
            w.write_all(b"\n")?;
            self.journal_has_header = true;
        }
        for s in samples {
            serde_json::to_writer(&mut *w, s).expect("sample serialization is infallible");
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    fn journal_clear(&mut self) -> Result<(), StoreError> {
        self.journal = None;
        self.journal_has_header = false;
        let path = self.root.join("open.jsonl");
        if path.exists() {
            fs::remove_file(path)?;
        }
        Ok(())
    }

    fn append_chunk(&mut self, chunk: &TripChunk) -> Result<(), StoreError> {
        let trip_id = &chunk.chunk_key.trip_id;
        let line = chunk_line(chunk);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.trip_path(trip_id, "jsonl"))?;
        f.write_all(line.as_bytes())?;
        f.flush()?;
        *self.used.entry(trip_id.clone()).or_default() += line.len() as u64;
        Ok(())
    }

    fn mark_acked(&mut self, trip_id: &TripId, seq: u32) -> Result<(), StoreError> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.trip_path(trip_id, "ack"))?;
        writeln!(f, "{seq}")?;
        Ok(())
    }

    fn write_finalize(&mut self, marker: &FinalizeMarker) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec(marker).expect("marker serialization is infallible");
        Self::write_atomic(&self.trip_path(&marker.trip_id, "fin"), &bytes)
    }

    fn rewrite_trip(&mut self, trip_id: &TripId, keep: &[TripChunk]) -> Result<(), StoreError> {
        let text: String = keep.iter().map(chunk_line).collect();
        Self::write_atomic(&self.trip_path(trip_id, "jsonl"), text.as_bytes())?;
        self.used.insert(trip_id.clone(), text.len() as u64);
        Ok(())
    }

    fn prune_trip(&mut self, trip_id: &TripId) -> Result<(), StoreError> {
        for ext in ["jsonl", "ack", "fin"] {
            let path = self.trip_path(trip_id, ext);
            if path.exists() {
                fs::remove_file(path)?;
            }
        }
        self.used.remove(trip_id);
        Ok(())
    }

    fn quarantine(&mut self, chunk: &TripChunk) -> Result<(), StoreError> {
        let key = &chunk.chunk_key;
        let path = self
            .root
            .join("quarantine")
            .join(format!("{}-{}.json", key.trip_id, key.seq));
        Self::write_atomic(&path, chunk.canonical_json().as_bytes())
    }

    fn used_bytes(&self) -> u64 {
        self.used.values().sum()
    }
}

#[derive(Debug, Default)]
struct MemoryDisk {
    state: Option<PersistedState>,
    journal: Option<(JournalHeader, Vec<SensorSample>)>,
    chunks: BTreeMap<TripId, Vec<(TripChunk, u64)>>,
    acked: BTreeSet<(TripId, u32)>,
    finalize: BTreeMap<TripId, FinalizeMarker>,
    quarantined: Vec<TripChunk>,
}

/// In-memory store. Clones share the same simulated disk, so an agent can be
/// dropped and recovered from a clone to model a process restart.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    disk: Arc<Mutex<MemoryDisk>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn disk(&self) -> std::sync::MutexGuard<'_, MemoryDisk> {
        self.disk.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn quarantined(&self) -> Vec<TripChunk> {
        self.disk().quarantined.clone()
    }
}

impl AgentStore for MemoryStore {
    fn load(&mut self) -> Result<Recovered, StoreError> {
        let d = self.disk();
        Ok(Recovered {
            state: d.state.clone(),
            chunks: d
                .chunks
                .values()
                .flat_map(|v| v.iter().map(|(c, _)| c.clone()))
                .collect(),
            acked: d.acked.clone(),
            finalize: d.finalize.clone(),
            journal: d.journal.clone(),
        })
    }

    fn save_state(&mut self, state: &PersistedState) -> Result<(), StoreError> {
        self.disk().state = Some(state.clone());
        Ok(())
    }

    fn journal_append(&mut self, header: &JournalHeader, samples: &[SensorSample]) -> Result<(), StoreError> {
        let mut d = self.disk();
        let journal = d.journal.get_or_insert_with(|| (header.clone(), Vec::new()));
        journal.1.extend_from_slice(samples);
        Ok(())
    }

    fn journal_clear(&mut self) -> Result<(), StoreError> {
        self.disk().journal = None;
        Ok(())
    }

    fn append_chunk(&mut self, chunk: &TripChunk) -> Result<(), StoreError> {
        let size = chunk_line(chunk).len() as u64;
        self.disk()
            .chunks
            .entry(chunk.chunk_key.trip_id.clone())
            .or_default()
            .push((chunk.clone(), size));
        Ok(())
    }

    fn mark_acked(&mut self, trip_id: &TripId, seq: u32) -> Result<(), StoreError> {
        self.disk().acked.insert((trip_id.clone(), seq));
        Ok(())
    }

    fn write_finalize(&mut self, marker: &FinalizeMarker) -> Result<(), StoreError> {
        self.disk()
            .finalize
            .insert(marker.trip_id.clone(), marker.clone());
        Ok(())
    }

    fn rewrite_trip(&mut self, trip_id: &TripId, keep: &[TripChunk]) -> Result<(), StoreError> {
        let entries = keep
            .iter()
            .map(|c| (c.clone(), chunk_line(c).len() as u64))
            .collect();
        self.disk().chunks.insert(trip_id.clone(), entries);
        Ok(())
    }

    fn prune_trip(&mut self, trip_id: &TripId) -> Result<(), StoreError> {
        let mut d = self.disk();
        d.chunks.remove(trip_id);
        d.finalize.remove(trip_id);
        d.acked.retain(|(t, _)| t != trip_id);
        Ok(())
    }

    fn quarantine(&mut self, chunk: &TripChunk) -> Result<(), StoreError> {
        self.disk().quarantined.push(chunk.clone());
        Ok(())
    }

    fn used_bytes(&self) -> u64 {
        self.disk()
            .chunks
            .values()
            .flat_map(|v| v.iter().map(|(_, size)| *size))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChunkKey, SampleValue, SensorKind};

    fn chunk(trip: &str, seq: u32) -> TripChunk {
        let sample = SensorSample {
            scooter_id: "s01".into(),
            trip_id: trip.into(),
            kind: SensorKind::Temperature,
            t: Timestamp(1_000 + seq as i64),
            value: SampleValue::scalar(20.0, "degC"),
        };
        TripChunk::seal(
            ChunkKey {
                scooter_id: "s01".into(),
                trip_id: trip.into(),
                seq,
            },
            vec![sample],
            Timestamp(2_000),
            1,
        )
    }

    fn exercise(store: &mut dyn AgentStore, reopen: &mut dyn FnMut() -> Box<dyn AgentStore>) {
        let state = PersistedState {
            trip_counter: 3,
            ..Default::default()
        };
        store.save_state(&state).unwrap();
        store.append_chunk(&chunk("s01-t00001", 0)).unwrap();
        store.append_chunk(&chunk("s01-t00001", 1)).unwrap();
        store.mark_acked(&"s01-t00001".into(), 0).unwrap();
        store
            .write_finalize(&FinalizeMarker {
                trip_id: "s01-t00001".into(),
                chunk_count: 2,
                ended_at: Timestamp(3_000),
                acked: false,
            })
            .unwrap();
        let header = JournalHeader {
            trip_id: "s01-t00002".into(),
            seq: 0,
        };
        store
            .journal_append(&header, &chunk("s01-t00002", 0).samples)
            .unwrap();
        assert!(store.used_bytes() > 0);

        let mut fresh = reopen();
        let rec = fresh.load().unwrap();
        assert_eq!(rec.state.unwrap().trip_counter, 3);
        assert_eq!(rec.chunks.len(), 2);
        assert!(rec.chunks.iter().all(|c| c.verify().is_ok()));
        assert!(rec.acked.contains(&("s01-t00001".into(), 0)));
        assert_eq!(rec.finalize.len(), 1);
        let (h, samples) = rec.journal.unwrap();
        assert_eq!(h, header);
        assert_eq!(samples.len(), 1);
        assert_eq!(fresh.used_bytes(), store.used_bytes());

        fresh.prune_trip(&"s01-t00001".into()).unwrap();
        fresh.journal_clear().unwrap();
        let rec = reopen().load().unwrap();
        assert!(rec.chunks.is_empty() && rec.finalize.is_empty() && rec.journal.is_none());
    }

    #[test]
    fn file_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = FileStore::open(dir.path()).unwrap();
        let path = dir.path().to_path_buf();
        exercise(&mut store, &mut || Box::new(FileStore::open(&path).unwrap()));
    }

    #[test]
    fn memory_store_clones_share_disk() {
        let mut store = MemoryStore::new();
        let shared = store.clone();
        exercise(&mut store, &mut || Box::new(shared.clone()));
    }
}
