//! Fleet controller: chunk ingestion and dedup, trip assembly, enrichment,
//! fleet inventory, loans and versioned config deployment.
//!
//! All state lives in memory and every mutation is first appended to a
//! [`Journal`]; opening a controller replays the journal.

pub mod enrich;
pub mod journal;
pub mod preprocess;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{Uplink, UplinkError};
use crate::model::{
    ChunkKey, Loan, LoanId, Project, ProjectId, Scooter, ScooterConfig, ScooterId, ScooterStatus,
    Timestamp, Trip, TripChunk, TripId, User, UserId, LOAN_PERIOD_MS,
};
use crate::policy::{validate_policy, DataCollectionPolicy, PolicyDraft, PolicyViolation};
use crate::protocol::{
    estimated_range_miles, ApiError, BatteryLevel, BatteryReading, Census, ChunkAck,
    FinalizeOutcome, Heartbeat,
};

pub use enrich::{AttemptMap, EnrichmentProvider};
pub use journal::{FileJournal, Journal, MemoryJournal, NullJournal, QuarantineEntry, Record, StorageError};

pub type TripKey = (ScooterId, TripId);

#[derive(Debug, Error)]
pub enum FcError {
    #[error("authentication failed")]
    Auth,
    #[error("unknown scooter {0}")]
    UnknownScooter(ScooterId),
    #[error("digest mismatch for chunk {0}")]
    DigestMismatch(ChunkKey),
    #[error("malformed chunk: {0}")]
    MalformedChunk(String),
    #[error("finalize conflict for trip {trip_id}: {reason}")]
    FinalizeConflict { trip_id: TripId, reason: String },
    #[error("invalid policy: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidPolicy(Vec<PolicyViolation>),
    #[error("scooter {0} is not available")]
    ScooterUnavailable(ScooterId),
    #[error("missing acknowledgment: {}", .0.join(", "))]
    MissingAcknowledgment(Vec<String>),
    #[error("loan {0} is not active")]
    LoanNotActive(LoanId),
    #[error("unknown loan {0}")]
    UnknownLoan(LoanId),
    #[error("unknown trip {0}")]
    UnknownTrip(TripId),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

impl FcError {
    pub fn code(&self) -> &'static str {
        match self {
            FcError::Auth => "AuthFailure",
            FcError::UnknownScooter(_) => "UnknownScooter",
            FcError::DigestMismatch(_) => "DigestMismatch",
            FcError::MalformedChunk(_) => "MalformedChunk",
            FcError::FinalizeConflict { .. } => "FinalizeConflict",
            FcError::InvalidPolicy(_) => "InvalidPolicy",
            FcError::ScooterUnavailable(_) => "ScooterUnavailable",
            FcError::MissingAcknowledgment(_) => "MissingAcknowledgment",
            FcError::LoanNotActive(_) => "LoanNotActive",
            FcError::UnknownLoan(_) => "UnknownLoan",
            FcError::UnknownTrip(_) => "UnknownTrip",
            FcError::Invalid(_) => "InvalidRequest",
            FcError::Storage(_) => "StorageError",
        }
    }

    pub fn to_api(&self) -> ApiError {
        let details = match self {
            FcError::InvalidPolicy(vs) => serde_json::json!(vs
                .iter()
                .map(|v| serde_json::json!({"code": v.code(), "message": v.to_string()}))
                .collect::<Vec<_>>()),
            FcError::MissingAcknowledgment(which) => serde_json::json!(which),
            FcError::DigestMismatch(key) => serde_json::json!(key),
            _ => serde_json::Value::Null,
        };
        ApiError::new(self.code(), self.to_string()).with_details(details)
    }
}

/// Rider acknowledgments collected at checkout and renewal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acknowledgments {
    pub consent: bool,
    pub safety_video: bool,
    pub survey: bool,
}

impl Acknowledgments {
    pub const ALL: Self = Self {
        consent: true,
        safety_video: true,
        survey: true,
    };

    pub fn missing(&self) -> Vec<String> {
        [("consent", self.consent), ("safety_video", self.safety_video), ("survey", self.survey)]
            .into_iter()
            .filter(|(_, ok)| !ok)
            .map(|(name, _)| name.to_owned())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub chunks_stored: u64,
    pub samples_stored: u64,
    pub duplicate_chunks: u64,
    pub trips_assembled: u64,
}

pub struct FleetController {
    journal: Box<dyn Journal>,
    secret: String,
    providers: Vec<Box<dyn EnrichmentProvider>>,
    scooters: BTreeMap<ScooterId, Scooter>,
    configs: BTreeMap<ScooterId, Vec<ScooterConfig>>,
    chunks: BTreeMap<TripKey, BTreeMap<u32, TripChunk>>,
    trip_owner: BTreeMap<TripId, ScooterId>,
    quarantine: Vec<QuarantineEntry>,
    finalize: BTreeMap<TripKey, u32>,
    quarantined_trips: BTreeMap<TripKey, String>,
    trips: BTreeMap<TripId, Trip>,
    attempts: BTreeMap<TripId, AttemptMap>,
    loans: BTreeMap<LoanId, Loan>,
    users: BTreeMap<UserId, User>,
    projects: BTreeMap<ProjectId, Project>,
    heartbeats: BTreeMap<ScooterId, (Heartbeat, Timestamp)>,
    anomalies: BTreeMap<ScooterId, u64>,
    stats: IngestStats,
}

impl FleetController {
    /// Opens a controller over `journal`, replaying whatever it holds.
    pub fn open(
        mut journal: Box<dyn Journal>,
        secret: &str,
        providers: Vec<Box<dyn EnrichmentProvider>>,
    ) -> Result<Self, StorageError> {
        let records = journal.replay()?;
        let mut fc = Self {
            journal,
            secret: secret.to_owned(),
            providers,
            scooters: BTreeMap::new(),
            configs: BTreeMap::new(),
            chunks: BTreeMap::new(),
            trip_owner: BTreeMap::new(),
            quarantine: Vec::new(),
            finalize: BTreeMap::new(),
            quarantined_trips: BTreeMap::new(),
            trips: BTreeMap::new(),
            attempts: BTreeMap::new(),
            loans: BTreeMap::new(),
            users: BTreeMap::new(),
            projects: BTreeMap::new(),
            heartbeats: BTreeMap::new(),
            anomalies: BTreeMap::new(),
            stats: IngestStats::default(),
        };
        for r in records {
            fc.apply(r);
        }
        Ok(fc)
    }

    /// Throwaway controller with no persistence.
    pub fn in_memory(secret: &str, providers: Vec<Box<dyn EnrichmentProvider>>) -> Self {
        Self::open(Box::new(NullJournal), secret, providers).expect("null journal cannot fail")
    }

    fn commit(&mut self, record: Record) -> Result<(), FcError> {
        self.journal.append(&record)?;
        self.apply(record);
        Ok(())
    }

    fn apply(&mut self, record: Record) {
        match record {
            Record::Scooter(s) => {
                self.scooters.insert(s.scooter_id.clone(), s);
            }
            Record::Config(c) => {
                if let Some(s) = self.scooters.get_mut(&c.scooter_id) {
                    s.current_config_version = c.version;
                }
                self.configs.entry(c.scooter_id.clone()).or_default().push(c);
            }
            Record::Chunk(c) => {
                let key = (c.chunk_key.scooter_id.clone(), c.chunk_key.trip_id.clone());
                self.trip_owner.insert(key.1.clone(), key.0.clone());
                self.stats.chunks_stored += 1;
                self.stats.samples_stored += c.samples.len() as u64;
                self.chunks.entry(key).or_default().insert(c.chunk_key.seq, c);
            }
            Record::Quarantine(q) => self.quarantine.push(q),
            Record::Finalize {
                scooter_id,
                trip_id,
                chunk_count,
            } => {
                self.finalize.insert((scooter_id, trip_id), chunk_count);
            }
            Record::TripQuarantined {
                scooter_id,
                trip_id,
                reason,
            } => {
                self.trips.remove(&trip_id);
                self.quarantined_trips.insert((scooter_id, trip_id), reason);
            }
            Record::Trip(t) => {
                if !self.trips.contains_key(&t.trip_id) {
                    self.stats.trips_assembled += 1;
                }
                self.trips.insert(t.trip_id.clone(), t);
            }
            Record::EnrichmentAttempts { trip_id, attempts } => {
                let map = attempts.into_iter().map(|(s, g, n)| ((s, g), n)).collect();
                self.attempts.insert(trip_id, map);
            }
            Record::Loan(l) => {
                self.loans.insert(l.loan_id.clone(), l);
            }
            Record::User(u) => {
                self.users.insert(u.user_id.clone(), u);
            }
            Record::Project(p) => {
                self.projects.insert(p.project_id.clone(), p);
            }
            Record::Heartbeat {
                scooter_id,
                heartbeat,
                at,
            } => {
                if let Some(s) = self.scooters.get_mut(&scooter_id) {
                    s.battery_pct = heartbeat.battery_pct;
                    s.odometer_m = heartbeat.odometer_m;
                }
                self.heartbeats.insert(scooter_id, (heartbeat, at));
            }
            Record::ConfigAnomaly { scooter_id, .. } => {
                *self.anomalies.entry(scooter_id).or_default() += 1;
            }
        }
    }

    pub fn flush(&mut self) -> Result<(), FcError> {
        self.journal.flush()?;
        Ok(())
    }

    // ---- fleet inventory ----

    /// Bearer token a scooter presents on the uplink.
    pub fn scooter_token(&self, scooter_id: &ScooterId) -> String {
        let mut h = Sha256::new();
        h.update(self.secret.as_bytes());
        h.update(b"\0");
        h.update(scooter_id.as_str().as_bytes());
        hex::encode(h.finalize())
    }

    fn authorize(&self, token: &str, scooter_id: &ScooterId) -> Result<(), FcError> {
        if token != self.scooter_token(scooter_id) {
            return Err(FcError::Auth);
        }
        if !self.scooters.contains_key(scooter_id) {
            return Err(FcError::UnknownScooter(scooter_id.clone()));
        }
        Ok(())
    }

    /// Registers a scooter; registering an existing id returns the stored record.
    pub fn register_scooter(&mut self, scooter: Scooter) -> Result<(Scooter, String), FcError> {
        let id = scooter.scooter_id.clone();
        if id.as_str().is_empty() || id.as_str().contains('/') {
            return Err(FcError::Invalid(format!("bad scooter id {id:?}")));
        }
        if !self.scooters.contains_key(&id) {
            self.commit(Record::Scooter(scooter))?;
        }
        Ok((self.scooters[&id].clone(), self.scooter_token(&id)))
    }

    pub fn scooter(&self, id: &ScooterId) -> Option<&Scooter> {
        self.scooters.get(id)
    }

    pub fn scooters(&self) -> impl Iterator<Item = &Scooter> {
        self.scooters.values()
    }

    fn scooter_or_err(&self, id: &ScooterId) -> Result<&Scooter, FcError> {
        self.scooters.get(id).ok_or_else(|| FcError::UnknownScooter(id.clone()))
    }

    fn set_status(&mut self, id: &ScooterId, status: ScooterStatus) -> Result<(), FcError> {
        let mut s = self.scooter_or_err(id)?.clone();
        s.status = status;
        self.commit(Record::Scooter(s))
    }

    // ---- ingestion ----

    pub fn receive_chunk(&mut self, token: &str, chunk: TripChunk, now: Timestamp) -> Result<ChunkAck, FcError> {
        let key = chunk.chunk_key.clone();
        self.authorize(token, &key.scooter_id)?;
        let trip_key = (key.scooter_id.clone(), key.trip_id.clone());
        if let Some(stored) = self.chunks.get(&trip_key).and_then(|m| m.get(&key.seq)) {
            if stored.digest == chunk.digest {
                self.stats.duplicate_chunks += 1;
                return Ok(ChunkAck {
                    chunk_key: key,
                    digest: stored.digest.clone(),
                });
            }
            self.commit(Record::Quarantine(QuarantineEntry {
                chunk_key: key.clone(),
                digest: chunk.digest.clone(),
                reason: format!("digest differs from stored {}", stored.digest),
                at: now,
            }))?;
            return Err(FcError::DigestMismatch(key));
        }
        chunk.verify().map_err(|e| FcError::MalformedChunk(e.to_string()))?;
        if self.trip_owner.get(&key.trip_id).is_some_and(|owner| *owner != key.scooter_id) {
            return Err(FcError::MalformedChunk(format!(
                "trip {} belongs to another scooter",
                key.trip_id
            )));
        }
        let digest = chunk.digest.clone();
        self.commit(Record::Chunk(chunk))?;
        if let Some(&count) = self.finalize.get(&trip_key) {
            if key.seq >= count {
                self.quarantine_trip(&trip_key, format!("chunk seq {} beyond finalized count {count}", key.seq))?;
            } else {
                self.try_assemble(&trip_key, now)?;
            }
        }
        Ok(ChunkAck { chunk_key: key, digest })
    }

    pub fn finalize_trip(
        &mut self,
        token: &str,
        scooter_id: &ScooterId,
        trip_id: &TripId,
        chunk_count: u32,
        now: Timestamp,
    ) -> Result<FinalizeOutcome, FcError> {
        self.authorize(token, scooter_id)?;
        let trip_key = (scooter_id.clone(), trip_id.clone());
        if self.quarantined_trips.contains_key(&trip_key) {
            return Err(FcError::FinalizeConflict {
                trip_id: trip_id.clone(),
                reason: "trip is quarantined".into(),
            });
        }
        match self.finalize.get(&trip_key) {
            Some(&prior) if prior != chunk_count => {
                let reason = format!("chunk count {chunk_count} conflicts with earlier {prior}");
                self.quarantine_trip(&trip_key, reason.clone())?;
                return Err(FcError::FinalizeConflict {
                    trip_id: trip_id.clone(),
                    reason,
                });
            }
            Some(_) => {}
            None => {
                let beyond = self
                    .chunks
                    .get(&trip_key)
                    .and_then(|m| m.keys().next_back())
                    .is_some_and(|&max| max >= chunk_count);
                if beyond || chunk_count == 0 {
                    let reason = format!("stored chunks do not fit count {chunk_count}");
                    self.quarantine_trip(&trip_key, reason.clone())?;
                    return Err(FcError::FinalizeConflict {
                        trip_id: trip_id.clone(),
                        reason,
                    });
                }
                self.commit(Record::Finalize {
                    scooter_id: scooter_id.clone(),
                    trip_id: trip_id.clone(),
                    chunk_count,
                })?;
            }
        }
        let missing = self.missing_seqs(&trip_key);
        if missing.is_empty() {
            self.try_assemble(&trip_key, now)?;
            Ok(FinalizeOutcome::Complete)
        } else {
            Ok(FinalizeOutcome::AwaitingChunks(missing))
        }
    }

    fn missing_seqs(&self, trip_key: &TripKey) -> Vec<u32> {
        let Some(&count) = self.finalize.get(trip_key) else {
            return Vec::new();
        };
        let have = self.chunks.get(trip_key);
        (0..count)
            .filter(|seq| !have.is_some_and(|m| m.contains_key(seq)))
            .collect()
    }

    fn quarantine_trip(&mut self, trip_key: &TripKey, reason: String) -> Result<(), FcError> {
        if self.quarantined_trips.contains_key(trip_key) {
            return Ok(());
        }
        self.commit(Record::TripQuarantined {
            scooter_id: trip_key.0.clone(),
            trip_id: trip_key.1.clone(),
            reason,
        })
    }

    fn try_assemble(&mut self, trip_key: &TripKey, now: Timestamp) -> Result<(), FcError> {
        if self.trips.contains_key(&trip_key.1)
            || self.quarantined_trips.contains_key(trip_key)
            || !self.finalize.contains_key(trip_key)
            || !self.missing_seqs(trip_key).is_empty()
        {
            return Ok(());
        }
        let chunks: Vec<TripChunk> = self.chunks[trip_key].values().cloned().collect();
        let Some(mut trip) = preprocess::preprocess_trip(&chunks) else {
            return Ok(());
        };
        trip.project_id = self.project_for_version(&trip.scooter_id, chunks[0].config_version);
        trip.loan_id = self
            .loans
            .values()
            .filter(|l| l.scooter_id == trip.scooter_id && l.covers(trip.started_at))
            .max_by_key(|l| l.started_at)
            .map(|l| l.loan_id.clone());
        self.enrich_and_store(trip, now)
    }

    fn project_for_version(&self, scooter_id: &ScooterId, version: u64) -> Option<ProjectId> {
        self.configs
            .get(scooter_id)?
            .iter()
            .find(|c| c.version == version)?
            .project_id
            .clone()
    }

    fn enrich_and_store(&mut self, mut trip: Trip, now: Timestamp) -> Result<(), FcError> {
        let mut attempts = self.attempts.get(&trip.trip_id).cloned().unwrap_or_default();
        let before = attempts.clone();
        enrich::enrich_trip(&mut trip, &self.providers, &mut attempts, now);
        if attempts != before {
            self.commit(Record::EnrichmentAttempts {
                trip_id: trip.trip_id.clone(),
                attempts: attempts.into_iter().map(|((s, g), n)| (s, g, n)).collect(),
            })?;
        }
        self.commit(Record::Trip(trip))
    }

    /// Retries every pending enrichment record once. Returns the number of
    /// trips touched.
    pub fn enrichment_sweep(&mut self, now: Timestamp) -> Result<usize, FcError> {
        let pending: Vec<Trip> = self.trips.values().filter(|t| enrich::has_pending(t)).cloned().collect();
        let n = pending.len();
        for trip in pending {
            self.enrich_and_store(trip, now)?;
        }
        Ok(n)
    }

    /// Stores an already assembled trip, e.g. from an export file.
    pub fn import_trip(&mut self, trip: Trip) -> Result<(), FcError> {
        if trip.scooter_id.as_str().is_empty() || trip.trip_id.as_str().is_empty() {
            return Err(FcError::Invalid("trip without ids".into()));
        }
        self.commit(Record::Trip(trip))
    }

    pub fn trip(&self, id: &TripId) -> Option<&Trip> {
        self.trips.get(id)
    }

    pub fn trips(&self) -> impl Iterator<Item = &Trip> {
        self.trips.values()
    }

    pub fn trip_count(&self) -> usize {
        self.trips.len()
    }

    pub fn stored_chunk(&self, key: &ChunkKey) -> Option<&TripChunk> {
        self.chunks
            .get(&(key.scooter_id.clone(), key.trip_id.clone()))?
            .get(&key.seq)
    }

    /// Sequence numbers stored for a trip.
    pub fn stored_seqs(&self, scooter_id: &ScooterId, trip_id: &TripId) -> Vec<u32> {
        self.chunks
            .get(&(scooter_id.clone(), trip_id.clone()))
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn stored_chunk_count(&self) -> usize {
        self.chunks.values().map(BTreeMap::len).sum()
    }

    pub fn finalized_count(&self, scooter_id: &ScooterId, trip_id: &TripId) -> Option<u32> {
        self.finalize.get(&(scooter_id.clone(), trip_id.clone())).copied()
    }

    pub fn quarantine(&self) -> &[QuarantineEntry] {
        &self.quarantine
    }

    pub fn quarantined_trips(&self) -> &BTreeMap<TripKey, String> {
        &self.quarantined_trips
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    /// Census of every stored sample in the listed trips.
    pub fn census(&self, trips: &[TripKey]) -> Census {
        let mut c = Census::default();
        for key in trips {
            for chunk in self.chunks.get(key).into_iter().flat_map(BTreeMap::values) {
                for s in &chunk.samples {
                    c.add(s);
                }
            }
        }
        c
    }

    // ---- configuration ----

    pub fn issue_config(
        &mut self,
        scooter_id: &ScooterId,
        policy: DataCollectionPolicy,
        project_id: Option<ProjectId>,
        now: Timestamp,
    ) -> Result<ScooterConfig, FcError> {
        self.scooter_or_err(scooter_id)?;
        let version = self.current_config(scooter_id).map_or(0, |c| c.version) + 1;
        let config = ScooterConfig {
            scooter_id: scooter_id.clone(),
            version,
            policy,
            issued_at: now,
            project_id,
        };
        self.commit(Record::Config(config.clone()))?;
        Ok(config)
    }

    pub fn issue_config_draft(
        &mut self,
        scooter_id: &ScooterId,
        draft: &PolicyDraft,
        project_id: Option<ProjectId>,
        now: Timestamp,
    ) -> Result<ScooterConfig, FcError> {
        self.scooter_or_err(scooter_id)?;
        let policy = validate_policy(draft).map_err(FcError::InvalidPolicy)?;
        self.issue_config(scooter_id, policy, project_id, now)
    }

    pub fn current_config(&self, scooter_id: &ScooterId) -> Option<&ScooterConfig> {
        self.configs.get(scooter_id)?.last()
    }

    pub fn config_history(&self, scooter_id: &ScooterId) -> &[ScooterConfig] {
        self.configs.get(scooter_id).map_or(&[], Vec::as_slice)
    }

    /// Config poll from a node. Also records its heartbeat.
    pub fn get_config(
        &mut self,
        token: &str,
        scooter_id: &ScooterId,
        client_version: u64,
        heartbeat: Option<Heartbeat>,
        now: Timestamp,
    ) -> Result<Option<ScooterConfig>, FcError> {
        self.authorize(token, scooter_id)?;
        if let Some(heartbeat) = heartbeat {
            if !(0.0..=100.0).contains(&heartbeat.battery_pct) || !(heartbeat.odometer_m >= 0.0) {
                return Err(FcError::Invalid("heartbeat out of range".into()));
            }
            self.commit(Record::Heartbeat {
                scooter_id: scooter_id.clone(),
                heartbeat,
                at: now,
            })?;
        }
        let current = self.current_config(scooter_id).map_or(0, |c| c.version);
        if client_version > current {
            self.commit(Record::ConfigAnomaly {
                scooter_id: scooter_id.clone(),
                client_version,
            })?;
            return Ok(None);
        }
        if current > client_version {
            return Ok(self.current_config(scooter_id).cloned());
        }
        Ok(None)
    }

    pub fn config_anomalies(&self, scooter_id: &ScooterId) -> u64 {
        self.anomalies.get(scooter_id).copied().unwrap_or(0)
    }

    pub fn battery_level(&self, scooter_id: &ScooterId) -> Result<BatteryLevel, FcError> {
        self.scooter_or_err(scooter_id)?;
        Ok(match self.heartbeats.get(scooter_id) {
            Some((hb, _)) => BatteryLevel {
                scooter_id: scooter_id.clone(),
                battery_pct: Some(hb.battery_pct),
                est_range_miles: Some(estimated_range_miles(hb.battery_pct)),
                status: BatteryReading::Reported,
            },
            None => BatteryLevel {
                scooter_id: scooter_id.clone(),
                battery_pct: None,
                est_range_miles: None,
                status: BatteryReading::Unknown,
            },
        })
    }

    pub fn battery_levels(&self) -> Vec<BatteryLevel> {
        self.scooters
            .keys()
            .map(|id| self.battery_level(id).expect("listed scooters exist"))
            .collect()
    }

    pub fn last_heartbeat(&self, scooter_id: &ScooterId) -> Option<(Heartbeat, Timestamp)> {
        self.heartbeats.get(scooter_id).copied()
    }

    // ---- loans ----

    pub fn checkout(
        &mut self,
        rider_id: &UserId,
        scooter_id: &ScooterId,
        acks: Acknowledgments,
        now: Timestamp,
    ) -> Result<Loan, FcError> {
        let scooter = self.scooter_or_err(scooter_id)?;
        if scooter.status != ScooterStatus::Available {
            return Err(FcError::ScooterUnavailable(scooter_id.clone()));
        }
        let missing = acks.missing();
        if !missing.is_empty() {
            return Err(FcError::MissingAcknowledgment(missing));
        }
        let loan = Loan {
            loan_id: LoanId::new(format!("loan-{:05}", self.loans.len() + 1)),
            rider_id: rider_id.clone(),
            scooter_id: scooter_id.clone(),
            started_at: now,
            due_at: now.plus_ms(LOAN_PERIOD_MS),
            returned_at: None,
            renewed_at: None,
            consent_ack: true,
            safety_video_ack: true,
            survey_done: true,
        };
        self.commit(Record::Loan(loan.clone()))?;
        self.set_status(scooter_id, ScooterStatus::Loaned)?;
        Ok(loan)
    }

    pub fn renew(&mut self, loan_id: &LoanId, acks: Acknowledgments, now: Timestamp) -> Result<Loan, FcError> {
        let mut loan = self.loan_or_err(loan_id)?.clone();
        if !loan.is_active() {
            return Err(FcError::LoanNotActive(loan_id.clone()));
        }
        let missing = acks.missing();
        if !missing.is_empty() {
            return Err(FcError::MissingAcknowledgment(missing));
        }
        if now < loan.period_start() {
            return Err(FcError::Invalid("renewal predates the current loan period".into()));
        }
        loan.renewed_at = Some(now);
        loan.due_at = now.plus_ms(LOAN_PERIOD_MS);
        self.commit(Record::Loan(loan.clone()))?;
        Ok(loan)
    }

    pub fn return_and_inspect(
        &mut self,
        loan_id: &LoanId,
        inspection_pass: bool,
        now: Timestamp,
    ) -> Result<ScooterStatus, FcError> {
        let mut loan = self.loan_or_err(loan_id)?.clone();
        if !loan.is_active() {
            return Err(FcError::LoanNotActive(loan_id.clone()));
        }
        loan.returned_at = Some(now.max(loan.period_start()));
        let status = if inspection_pass {
            ScooterStatus::Available
        } else {
            ScooterStatus::Maintenance
        };
        let scooter_id = loan.scooter_id.clone();
        self.commit(Record::Loan(loan))?;
        self.set_status(&scooter_id, status)?;
        Ok(status)
    }

    /// Re-inspects a scooter held for maintenance.
    pub fn inspect(&mut self, scooter_id: &ScooterId, pass: bool) -> Result<ScooterStatus, FcError> {
        let status = self.scooter_or_err(scooter_id)?.status;
        if status == ScooterStatus::Loaned {
            return Err(FcError::ScooterUnavailable(scooter_id.clone()));
        }
        let next = if pass {
            ScooterStatus::Available
        } else {
            ScooterStatus::Maintenance
        };
        if next != status {
            self.set_status(scooter_id, next)?;
        }
        Ok(next)
    }

    fn loan_or_err(&self, id: &LoanId) -> Result<&Loan, FcError> {
        self.loans.get(id).ok_or_else(|| FcError::UnknownLoan(id.clone()))
    }

    pub fn loan(&self, id: &LoanId) -> Option<&Loan> {
        self.loans.get(id)
    }

    pub fn loans(&self) -> impl Iterator<Item = &Loan> {
        self.loans.values()
    }

    // ---- portal records ----

    pub fn put_user(&mut self, user: User) -> Result<(), FcError> {
        self.commit(Record::User(user))
    }

    pub fn user(&self, id: &UserId) -> Option<&User> {
        self.users.get(id)
    }

    pub fn users(&self) -> impl Iterator<Item = &User> {
        self.users.values()
    }

    pub fn put_project(&mut self, project: Project) -> Result<(), FcError> {
        self.commit(Record::Project(project))
    }

    pub fn project(&self, id: &ProjectId) -> Option<&Project> {
        self.projects.get(id)
    }

    pub fn projects(&self) -> impl Iterator<Item = &Project> {
        self.projects.values()
    }
}

/// In-process uplink calling straight into a controller at a fixed clock.
pub struct LocalLink<'a> {
    pub controller: &'a mut FleetController,
    pub now: Timestamp,
}

pub fn uplink_error(e: FcError) -> UplinkError {
    match e {
        FcError::Auth => UplinkError::Auth,
        FcError::DigestMismatch(key) => UplinkError::DigestMismatch(key.to_string()),
        FcError::Storage(e) => UplinkError::Unreachable(e.to_string()),
        other => UplinkError::Rejected(other.to_string()),
    }
}

impl Uplink for LocalLink<'_> {
    fn put_chunk(&mut self, token: &str, chunk: &TripChunk) -> Result<ChunkAck, UplinkError> {
        self.controller
            .receive_chunk(token, chunk.clone(), self.now)
            .map_err(uplink_error)
    }

    fn finalize_trip(
        &mut self,
        token: &str,
        scooter_id: &ScooterId,
        trip_id: &TripId,
        chunk_count: u32,
    ) -> Result<FinalizeOutcome, UplinkError> {
        self.controller
            .finalize_trip(token, scooter_id, trip_id, chunk_count, self.now)
            .map_err(uplink_error)
    }

    fn fetch_config(
        &mut self,
        token: &str,
        scooter_id: &ScooterId,
        current_version: u64,
        heartbeat: Heartbeat,
    ) -> Result<Option<ScooterConfig>, UplinkError> {
        self.controller
            .get_config(token, scooter_id, current_version, Some(heartbeat), self.now)
            .map_err(uplink_error)
    }
}

#[cfg(test)]
mod tests;
