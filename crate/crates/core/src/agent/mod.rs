//! The on-scooter agent: samples sensors under the active config, splits
//! rides into trips, seals chunks into a durable outbox and uploads them
//! whenever a link is available.

mod motion;
mod sampler;
pub mod store;
mod uplink;

use std::collections::{BTreeMap, BTreeSet};
use std::mem;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::point_in_fence;
use crate::model::{ChunkKey, GeoPoint, ScooterConfig, ScooterId, SensorKind, SensorSample, Timestamp, TripChunk, TripId};
use crate::policy::DataCollectionPolicy;
use crate::protocol::{BatteryStatus, FinalizeOutcome, Heartbeat};
use crate::schedule::schedule_contains;

pub use motion::{motion_transition, RideState, SpeedWindow, MOVING_SPEED_MPS, START_AFTER_MS, STOP_AFTER_MS};
pub use sampler::{Sampler, SensorSource, SourceError};
pub use store::{AgentStore, FileStore, FinalizeMarker, MemoryStore, OpenTrip, PersistedState, StoreError};
pub use uplink::{Uplink, UplinkError};

use store::JournalHeader;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone)]
pub struct AgentLimits {
    pub max_chunk_samples: usize,
    pub max_chunk_age_ms: i64,
    pub storage_capacity_bytes: Option<u64>,
    pub max_uploads_per_sync: Option<usize>,
}

impl Default for AgentLimits {
    fn default() -> Self {
        Self {
            max_chunk_samples: 4_096,
            max_chunk_age_ms: 60_000,
            storage_capacity_bytes: None,
            max_uploads_per_sync: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Recorded,
    /// Outside the policy's fence or schedule; never stored or uploaded.
    Suppressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SealReason {
    SizeLimit,
    TripEnd,
    TimeLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UploadState {
    Pending,
    Acked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutboxEntry {
    pub chunk: TripChunk,
    pub upload_state: UploadState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AgentEvent {
    TripStarted {
        trip_id: TripId,
        at: Timestamp,
        config_version: u64,
    },
    TripEnded {
        trip_id: TripId,
        ended_at: Timestamp,
        chunk_count: u32,
    },
    ChunkSealed {
        chunk_key: ChunkKey,
        samples: usize,
        digest: String,
        reason: SealReason,
    },
    ConfigApplied {
        version: u64,
    },
    ConfigDeferred {
        version: u64,
    },
    ConfigRejected {
        version: Option<u64>,
        reason: String,
    },
    StoragePressure {
        pruned_chunks: usize,
        dropped: Vec<SensorSample>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum UploadEvent {
    ChunkAcked { chunk_key: ChunkKey, samples: usize },
    ChunkFailed { chunk_key: ChunkKey, error: String },
    ChunkQuarantined { chunk_key: ChunkKey, error: String },
    TripFinalized { trip_id: TripId, outcome: FinalizeOutcome },
    FinalizeFailed { trip_id: TripId, error: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UploadReport {
    pub sent: usize,
    pub acked: usize,
    pub failed: usize,
    pub events: Vec<UploadEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigOutcome {
    NoChange,
    Applied(u64),
    /// Accepted; takes effect when the current trip ends.
    Deferred(u64),
    RejectedStale(u64),
    RejectedMalformed(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentCounters {
    pub dropouts: BTreeMap<SensorKind, u64>,
    pub alerts: u64,
    pub quarantined: u64,
    pub storage_drops: u64,
    pub auth_failures: u64,
}

/// Output of one sampling tick.
#[derive(Debug, Default)]
pub struct TickOutput {
    pub samples: Vec<(SensorSample, Disposition)>,
    pub events: Vec<AgentEvent>,
}

/// Whether a sample taken at `now` passes the policy's fence and schedule,
/// judged by the most recent GPS fix.
pub fn gate(policy: &DataCollectionPolicy, last_fix: Option<GeoPoint>, now: Timestamp) -> Disposition {
    if !schedule_contains(policy.schedule(), now) {
        return Disposition::Suppressed;
    }
    if let Some(fence) = policy.fence() {
        match last_fix {
            Some(p) if point_in_fence(p, fence) => {}
            _ => return Disposition::Suppressed,
        }
    }
    Disposition::Recorded
}

pub struct NodeAgent {
    scooter_id: ScooterId,
    token: String,
    limits: AgentLimits,
    store: Box<dyn AgentStore>,
    persisted: PersistedState,
    ride: RideState,
    speeds: SpeedWindow,
    sampler: Sampler,
    buffer: Vec<SensorSample>,
    buffer_opened: Option<Timestamp>,
    last_fix: Option<GeoPoint>,
    outbox: BTreeMap<(TripId, u32), OutboxEntry>,
    finalize: BTreeMap<TripId, FinalizeMarker>,
    counters: AgentCounters,
    uploads_suspended: bool,
    battery_pct: f64,
    odometer_m: f64,
}

impl NodeAgent {
    /// Opens an agent over `store`, replaying whatever it holds.
    pub fn open(
        scooter_id: ScooterId,
        token: impl Into<String>,
        mut store: Box<dyn AgentStore>,
        limits: AgentLimits,
    ) -> Result<Self, AgentError> {
        let rec = store.load()?;
        let mut persisted = rec.state.unwrap_or_default();
        let mut outbox = BTreeMap::new();
        for chunk in rec.chunks {
            let key = (chunk.chunk_key.trip_id.clone(), chunk.chunk_key.seq);
            let upload_state = if rec.acked.contains(&key) {
                UploadState::Acked
            } else {
                UploadState::Pending
            };
            outbox.insert(key, OutboxEntry { chunk, upload_state });
        }
        // a seal may have reached the outbox before the state file
        if let Some(open) = persisted.current_trip.as_mut() {
            if let Some(((_, seq), _)) = outbox.range((open.trip_id.clone(), 0)..=(open.trip_id.clone(), u32::MAX)).next_back() {
                open.next_seq = open.next_seq.max(seq + 1);
            }
        }
        let mut buffer = Vec::new();
        let mut buffer_opened = None;
        match (&rec.journal, &persisted.current_trip) {
            (Some((header, samples)), Some(open)) if header.trip_id == open.trip_id && header.seq == open.next_seq => {
                buffer = samples.clone();
                buffer_opened = buffer.first().map(|s| s.t);
            }
            (Some(_), _) => store.journal_clear()?,
            _ => {}
        }
        let ride = match &persisted.current_trip {
            Some(open) => RideState::Recording(open.trip_id.clone()),
            None => RideState::Idle,
        };
        let mut agent = Self {
            scooter_id,
            token: token.into(),
            limits,
            store,
            persisted,
            ride,
            speeds: SpeedWindow::new(),
            sampler: Sampler::new(),
            buffer,
            buffer_opened,
            last_fix: None,
            outbox,
            finalize: rec.finalize,
            counters: AgentCounters::default(),
            uploads_suspended: false,
            battery_pct: 100.0,
            odometer_m: 0.0,
        };
        let done: Vec<TripId> = agent
            .finalize
            .values()
            .filter(|m| m.acked)
            .map(|m| m.trip_id.clone())
            .collect();
        for trip_id in done {
            agent.prune_trip(&trip_id)?;
        }
        Ok(agent)
    }

    pub fn scooter_id(&self) -> &ScooterId {
        &self.scooter_id
    }

    pub fn ride(&self) -> &RideState {
        &self.ride
    }

    pub fn active_config(&self) -> Option<&ScooterConfig> {
        self.persisted.active_config.as_ref()
    }

    pub fn pending_config(&self) -> Option<&ScooterConfig> {
        self.persisted.pending_config.as_ref()
    }

    pub fn current_trip(&self) -> Option<&OpenTrip> {
        self.persisted.current_trip.as_ref()
    }

    pub fn counters(&self) -> &AgentCounters {
        &self.counters
    }

    pub fn uploads_suspended(&self) -> bool {
        self.uploads_suspended
    }

    pub fn outbox(&self) -> impl Iterator<Item = &OutboxEntry> {
        self.outbox.values()
    }

    pub fn pending_chunks(&self) -> usize {
        self.outbox
            .values()
            .filter(|e| e.upload_state == UploadState::Pending)
            .count()
    }

    /// Samples recorded but not yet acknowledged by the server.
    pub fn held_samples(&self) -> usize {
        self.buffer.len()
            + self
                .outbox
                .values()
                .filter(|e| e.upload_state == UploadState::Pending)
                .map(|e| e.chunk.samples.len())
                .sum::<usize>()
    }

    /// The samples counted by [`held_samples`](Self::held_samples).
    pub fn unsent_samples(&self) -> impl Iterator<Item = &SensorSample> {
        self.outbox
            .values()
            .filter(|e| e.upload_state == UploadState::Pending)
            .flat_map(|e| e.chunk.samples.iter())
            .chain(self.buffer.iter())
    }

    pub fn buffered_samples(&self) -> usize {
        self.buffer.len()
    }

    /// Unacked chunks and trip markers still waiting for the server.
    pub fn has_unsent_work(&self) -> bool {
        !self.buffer.is_empty()
            || self.pending_chunks() > 0
            || self.finalize.values().any(|m| !m.acked)
    }

    pub fn set_vehicle_state(&mut self, battery_pct: f64, odometer_m: f64) {
        self.battery_pct = battery_pct.clamp(0.0, 100.0);
        self.odometer_m = odometer_m;
    }

    pub fn battery_status(&self) -> BatteryStatus {
        BatteryStatus::from_pct(self.battery_pct)
    }

    /// Installs a config directly, as done when a node is first provisioned.
    pub fn provision(&mut self, config: ScooterConfig) -> Result<ConfigOutcome, AgentError> {
        self.accept_config(config)
    }

    fn known_version(&self) -> u64 {
        let active = self.persisted.active_config.as_ref().map_or(0, |c| c.version);
        let pending = self.persisted.pending_config.as_ref().map_or(0, |c| c.version);
        active.max(pending)
    }

    fn accept_config(&mut self, config: ScooterConfig) -> Result<ConfigOutcome, AgentError> {
        if config.scooter_id != self.scooter_id {
            self.counters.alerts += 1;
            return Ok(ConfigOutcome::RejectedMalformed(format!(
                "config addressed to {}",
                config.scooter_id
            )));
        }
        if config.version <= self.known_version() {
            return Ok(ConfigOutcome::RejectedStale(config.version));
        }
        let version = config.version;
        if self.ride == RideState::Idle {
            self.persisted.active_config = Some(config);
            self.persisted.pending_config = None;
            self.store.save_state(&self.persisted)?;
            Ok(ConfigOutcome::Applied(version))
        } else {
            self.persisted.pending_config = Some(config);
            self.store.save_state(&self.persisted)?;
            Ok(ConfigOutcome::Deferred(version))
        }
    }

    fn config_events(outcome: &ConfigOutcome) -> Option<AgentEvent> {
        match outcome {
            ConfigOutcome::Applied(v) => Some(AgentEvent::ConfigApplied { version: *v }),
            ConfigOutcome::Deferred(v) => Some(AgentEvent::ConfigDeferred { version: *v }),
            ConfigOutcome::RejectedStale(v) => Some(AgentEvent::ConfigRejected {
                version: Some(*v),
                reason: "stale".into(),
            }),
            ConfigOutcome::RejectedMalformed(reason) => Some(AgentEvent::ConfigRejected {
                version: None,
                reason: reason.clone(),
            }),
            ConfigOutcome::NoChange => None,
        }
    }

    /// Polls for a newer config and reports the vehicle heartbeat.
    pub fn refresh_config(&mut self, uplink: &mut dyn Uplink) -> Result<(ConfigOutcome, Vec<AgentEvent>), AgentError> {
        let heartbeat = Heartbeat {
            battery_pct: self.battery_pct,
            odometer_m: self.odometer_m,
        };
        let outcome = match uplink.fetch_config(&self.token, &self.scooter_id, self.known_version(), heartbeat) {
            Ok(None) => {
                self.uploads_suspended = false;
                ConfigOutcome::NoChange
            }
            Ok(Some(config)) => {
                self.uploads_suspended = false;
                self.accept_config(config)?
            }
            Err(UplinkError::Malformed(reason)) | Err(UplinkError::Rejected(reason)) => {
                self.counters.alerts += 1;
                ConfigOutcome::RejectedMalformed(reason)
            }
            Err(UplinkError::Auth) => {
                self.counters.auth_failures += 1;
                self.uploads_suspended = true;
                ConfigOutcome::NoChange
            }
            Err(_) => ConfigOutcome::NoChange,
        };
        let events = Self::config_events(&outcome).into_iter().collect();
        Ok((outcome, events))
    }

    /// Feeds one speed estimate and applies any ride state transition.
    pub fn observe_speed(&mut self, now: Timestamp, speed_mps: f64) -> Result<Vec<AgentEvent>, AgentError> {
        self.speeds.push(now, speed_mps);
        let next_trip = TripId::new(format!("{}-t{:05}", self.scooter_id, self.persisted.trip_counter + 1));
        let next = motion_transition(&self.ride, &self.speeds, now, || next_trip);
        let mut events = Vec::new();
        match (&self.ride, next) {
            (RideState::Idle, RideState::Recording(trip_id)) => {
                self.persisted.trip_counter += 1;
                let config_version = self.active_config().map_or(0, |c| c.version);
                self.persisted.current_trip = Some(OpenTrip {
                    trip_id: trip_id.clone(),
                    started_at: now,
                    config_version,
                    next_seq: 0,
                });
                self.sampler.reset();
                self.last_fix = None;
                self.buffer.clear();
                self.buffer_opened = None;
                self.store.save_state(&self.persisted)?;
                self.ride = RideState::Recording(trip_id.clone());
                events.push(AgentEvent::TripStarted {
                    trip_id,
                    at: now,
                    config_version,
                });
            }
            (RideState::Recording(_), RideState::Draining { trip_id, ended_at }) => {
                self.ride = RideState::Draining {
                    trip_id: trip_id.clone(),
                    ended_at,
                };
                events.extend(self.finish_trip(trip_id, ended_at, now)?);
            }
            _ => {}
        }
        Ok(events)
    }

    /// Seals the final chunk, writes the finalize marker and returns to Idle,
    /// activating any deferred config.
    fn finish_trip(&mut self, trip_id: TripId, ended_at: Timestamp, now: Timestamp) -> Result<Vec<AgentEvent>, AgentError> {
        let mut events = self.seal_chunk(SealReason::TripEnd, now)?;
        let chunk_count = self.persisted.current_trip.as_ref().map_or(0, |t| t.next_seq);
        if chunk_count > 0 {
            let marker = FinalizeMarker {
                trip_id: trip_id.clone(),
                chunk_count,
                ended_at,
                acked: false,
            };
            self.store.write_finalize(&marker)?;
            self.finalize.insert(trip_id.clone(), marker);
        }
        self.persisted.current_trip = None;
        self.ride = RideState::Idle;
        if let Some(cfg) = self.persisted.pending_config.take() {
            let version = cfg.version;
            self.persisted.active_config = Some(cfg);
            events.push(AgentEvent::ConfigApplied { version });
        }
        self.store.save_state(&self.persisted)?;
        self.store.journal_clear()?;
        events.push(AgentEvent::TripEnded {
            trip_id,
            ended_at,
            chunk_count,
        });
        Ok(events)
    }

    /// Samples every due sensor. Only does work while recording.
    pub fn sample_tick(&mut self, now: Timestamp, source: &mut dyn SensorSource) -> Result<TickOutput, AgentError> {
        let mut out = TickOutput::default();
        let RideState::Recording(trip_id) = &self.ride else {
            return Ok(out);
        };
        let Some(config) = self.persisted.active_config.as_ref() else {
            return Ok(out);
        };
        let trip_id = trip_id.clone();
        let policy = config.policy.clone();
        if self
            .buffer_opened
            .is_some_and(|opened| now.millis() - opened.millis() >= self.limits.max_chunk_age_ms)
        {
            out.events.extend(self.seal_chunk(SealReason::TimeLimit, now)?);
        }
        for kind in self.sampler.due(now, &policy) {
            let value = match source.read(&kind, now) {
                Ok(v) => v,
                Err(_) => {
                    *self.counters.dropouts.entry(kind).or_default() += 1;
                    continue;
                }
            };
            let sample = SensorSample {
                scooter_id: self.scooter_id.clone(),
                trip_id: trip_id.clone(),
                kind,
                t: now,
                value,
            };
            if sample.validate().is_err() {
                *self.counters.dropouts.entry(sample.kind).or_default() += 1;
                continue;
            }
            if sample.kind == SensorKind::Gps {
                self.last_fix = sample.value.position();
            }
            let disposition = gate(&policy, self.last_fix, now);
            out.samples.push((sample, disposition));
        }
        let recorded: Vec<SensorSample> = out
            .samples
            .iter()
            .filter(|(_, d)| *d == Disposition::Recorded)
            .map(|(s, _)| s.clone())
            .collect();
        if !recorded.is_empty() {
            let seq = self.persisted.current_trip.as_ref().map_or(0, |t| t.next_seq);
            self.store.journal_append(&JournalHeader { trip_id, seq }, &recorded)?;
            self.buffer_opened.get_or_insert(now);
            self.buffer.extend(recorded);
        }
        if self.buffer.len() >= self.limits.max_chunk_samples {
            out.events.extend(self.seal_chunk(SealReason::SizeLimit, now)?);
        }
        Ok(out)
    }

    /// Moves the open buffer into a durable outbox chunk. An empty buffer
    /// seals nothing.
    pub fn seal_chunk(&mut self, reason: SealReason, now: Timestamp) -> Result<Vec<AgentEvent>, AgentError> {
        let mut events = Vec::new();
        if self.buffer.is_empty() {
            return Ok(events);
        }
        let Some(open) = self.persisted.current_trip.clone() else {
            return Ok(events);
        };
        let key = ChunkKey {
            scooter_id: self.scooter_id.clone(),
            trip_id: open.trip_id.clone(),
            seq: open.next_seq,
        };
        let samples = mem::take(&mut self.buffer);
        self.buffer_opened = None;
        let mut chunk = TripChunk::seal(key.clone(), samples, now, open.config_version);
        if let Some(event) = self.make_room(&mut chunk)? {
            events.push(event);
        }
        self.store.append_chunk(&chunk)?;
        if let Some(t) = self.persisted.current_trip.as_mut() {
            t.next_seq += 1;
        }
        self.store.save_state(&self.persisted)?;
        self.store.journal_clear()?;
        events.push(AgentEvent::ChunkSealed {
            chunk_key: key.clone(),
            samples: chunk.samples.len(),
            digest: chunk.digest.clone(),
            reason,
        });
        self.outbox.insert(
            (key.trip_id, key.seq),
            OutboxEntry {
                chunk,
                upload_state: UploadState::Pending,
            },
        );
        Ok(events)
    }

    /// Frees space for `chunk`: prunes acked chunks first, then drops blob
    /// samples from the chunk itself.
    fn make_room(&mut self, chunk: &mut TripChunk) -> Result<Option<AgentEvent>, AgentError> {
        let Some(capacity) = self.limits.storage_capacity_bytes else {
            return Ok(None);
        };
        let size = |c: &TripChunk| c.canonical_json().len() as u64 + 1;
        if self.store.used_bytes() + size(chunk) <= capacity {
            return Ok(None);
        }
        let acked: BTreeSet<TripId> = self
            .outbox
            .iter()
            .filter(|(_, e)| e.upload_state == UploadState::Acked)
            .map(|((t, _), _)| t.clone())
            .collect();
        let mut pruned_chunks = 0;
        for trip_id in acked {
            let before = self.outbox.len();
            self.outbox
                .retain(|(t, _), e| !(t == &trip_id && e.upload_state == UploadState::Acked));
            pruned_chunks += before - self.outbox.len();
            let keep: Vec<TripChunk> = self
                .outbox
                .range((trip_id.clone(), 0)..=(trip_id.clone(), u32::MAX))
                .map(|(_, e)| e.chunk.clone())
                .collect();
            self.store.rewrite_trip(&trip_id, &keep)?;
            if self.store.used_bytes() + size(chunk) <= capacity {
                break;
            }
        }
        let mut dropped = Vec::new();
        if self.store.used_bytes() + size(chunk) > capacity {
            for kind in [SensorKind::Camera, SensorKind::Microphone] {
                let (gone, kept): (Vec<_>, Vec<_>) = mem::take(&mut chunk.samples)
                    .into_iter()
                    .partition(|s| s.kind == kind);
                chunk.samples = kept;
                dropped.extend(gone);
                if self.store.used_bytes() + size(chunk) <= capacity {
                    break;
                }
            }
            if !dropped.is_empty() {
                *chunk = TripChunk::seal(
                    chunk.chunk_key.clone(),
                    mem::take(&mut chunk.samples),
                    chunk.sealed_at,
                    chunk.config_version,
                );
                self.counters.storage_drops += dropped.len() as u64;
            }
        }
        Ok(Some(AgentEvent::StoragePressure {
            pruned_chunks,
            dropped,
        }))
    }

    fn prune_trip(&mut self, trip_id: &TripId) -> Result<(), AgentError> {
        self.store.prune_trip(trip_id)?;
        self.outbox.retain(|(t, _), _| t != trip_id);
        self.finalize.remove(trip_id);
        Ok(())
    }

    /// Uploads pending chunks in (trip, seq) order, then finalizes trips whose
    /// chunks are all acknowledged. Offline calls do nothing.
    pub fn sync(&mut self, online: bool, uplink: &mut dyn Uplink) -> Result<UploadReport, AgentError> {
        let mut report = UploadReport::default();
        if !online || self.uploads_suspended {
            return Ok(report);
        }
        let pending: Vec<(TripId, u32)> = self
            .outbox
            .iter()
            .filter(|(_, e)| e.upload_state == UploadState::Pending)
            .map(|(k, _)| k.clone())
            .collect();
        let budget = self.limits.max_uploads_per_sync.unwrap_or(usize::MAX);
        let mut link_down = false;
        for key in pending.into_iter().take(budget) {
            let chunk = &self.outbox[&key].chunk;
            report.sent += 1;
            match uplink.put_chunk(&self.token, chunk) {
                Ok(ack) if ack.digest == chunk.digest && ack.chunk_key == chunk.chunk_key => {
                    let samples = chunk.samples.len();
                    let chunk_key = chunk.chunk_key.clone();
                    self.store.mark_acked(&key.0, key.1)?;
                    if let Some(e) = self.outbox.get_mut(&key) {
                        e.upload_state = UploadState::Acked;
                    }
                    report.acked += 1;
                    report.events.push(UploadEvent::ChunkAcked { chunk_key, samples });
                }
                Ok(ack) => {
                    let chunk_key = chunk.chunk_key.clone();
                    report.failed += 1;
                    self.counters.alerts += 1;
                    report.events.push(UploadEvent::ChunkFailed {
                        chunk_key,
                        error: format!("ack echoed {} / {}", ack.chunk_key, ack.digest),
                    });
                    link_down = true;
                    break;
                }
                Err(UplinkError::DigestMismatch(msg)) | Err(UplinkError::Rejected(msg)) => {
                    let entry = self.outbox.remove(&key).expect("pending key present");
                    self.store.quarantine(&entry.chunk)?;
                    self.counters.alerts += 1;
                    self.counters.quarantined += 1;
                    report.failed += 1;
                    report.events.push(UploadEvent::ChunkQuarantined {
                        chunk_key: entry.chunk.chunk_key,
                        error: msg,
                    });
                }
                Err(UplinkError::Auth) => {
                    let chunk_key = chunk.chunk_key.clone();
                    self.uploads_suspended = true;
                    self.counters.auth_failures += 1;
                    report.failed += 1;
                    report.events.push(UploadEvent::ChunkFailed {
                        chunk_key,
                        error: UplinkError::Auth.to_string(),
                    });
                    return Ok(report);
                }
                Err(e) => {
                    let chunk_key = chunk.chunk_key.clone();
                    report.failed += 1;
                    report.events.push(UploadEvent::ChunkFailed {
                        chunk_key,
                        error: e.to_string(),
                    });
                    link_down = true;
                    break;
                }
            }
        }
        if link_down {
            return Ok(report);
        }
        let ready: Vec<FinalizeMarker> = self
            .finalize
            .values()
            .filter(|m| !m.acked)
            .filter(|m| {
                !self
                    .outbox
                    .range((m.trip_id.clone(), 0)..=(m.trip_id.clone(), u32::MAX))
                    .any(|(_, e)| e.upload_state == UploadState::Pending)
            })
            .cloned()
            .collect();
        for mut marker in ready {
            match uplink.finalize_trip(&self.token, &self.scooter_id, &marker.trip_id, marker.chunk_count) {
                Ok(outcome) => {
                    marker.acked = true;
                    self.store.write_finalize(&marker)?;
                    self.prune_trip(&marker.trip_id)?;
                    report.events.push(UploadEvent::TripFinalized {
                        trip_id: marker.trip_id,
                        outcome,
                    });
                }
                Err(UplinkError::Auth) => {
                    self.uploads_suspended = true;
                    self.counters.auth_failures += 1;
                    report.events.push(UploadEvent::FinalizeFailed {
                        trip_id: marker.trip_id,
                        error: UplinkError::Auth.to_string(),
                    });
                    break;
                }
                Err(UplinkError::Unreachable(msg)) => {
                    report.events.push(UploadEvent::FinalizeFailed {
                        trip_id: marker.trip_id,
                        error: UplinkError::Unreachable(msg).to_string(),
                    });
                    break;
                }
                Err(e) => {
                    // the server refused the marker; its chunks are already acked
                    self.counters.alerts += 1;
                    marker.acked = true;
                    self.store.write_finalize(&marker)?;
                    self.prune_trip(&marker.trip_id)?;
                    report.events.push(UploadEvent::FinalizeFailed {
                        trip_id: marker.trip_id,
                        error: e.to_string(),
                    });
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests;
