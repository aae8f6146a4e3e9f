use std::collections::BTreeMap;

use super::*;
use crate::geo::GeoFence;
use crate::model::{SampleValue, Timestamp};
use crate::protocol::ChunkAck;
use crate::schedule::Schedule;

const T0: i64 = 1_741_000_000_000;

struct ConstSource {
    fix: GeoPoint,
    fail: Vec<SensorKind>,
}

impl ConstSource {
    fn new() -> Self {
        Self {
            fix: GeoPoint::new(29.583, -98.619).unwrap(),
            fail: Vec::new(),
        }
    }
}

impl SensorSource for ConstSource {
    fn read(&mut self, kind: &SensorKind, _now: Timestamp) -> Result<SampleValue, SourceError> {
        if self.fail.contains(kind) {
            return Err(SourceError {
                kind: kind.clone(),
                reason: "unplugged".into(),
            });
        }
        Ok(match kind {
            SensorKind::Gps => SampleValue::Fix {
                position: self.fix,
                speed_mps: 3.0,
                heading_deg: 90.0,
                hdop: 0.8,
            },
            SensorKind::Camera | SensorKind::Microphone => SampleValue::BlobRef {
                byte_len: 2048,
                digest: "00".repeat(32),
            },
            k if k.vector_unit().is_some() => SampleValue::vector3([0.0, 0.0, 9.81], k.vector_unit().unwrap()),
            k => SampleValue::scalar(1.0, k.scalar_unit().unwrap_or("unit")),
        })
    }
}

/// Test double recording every request it sees.
#[derive(Default)]
struct FakeServer {
    stored: BTreeMap<ChunkKey, String>,
    observed: Vec<ChunkKey>,
    finalized: Vec<(TripId, u32)>,
    drop_after_puts: Option<usize>,
    successful_puts: usize,
    config: Option<ScooterConfig>,
    reject_auth: bool,
    heartbeats: Vec<Heartbeat>,
}

impl Uplink for FakeServer {
    fn put_chunk(&mut self, _token: &str, chunk: &TripChunk) -> Result<ChunkAck, UplinkError> {
        if self.reject_auth {
            return Err(UplinkError::Auth);
        }
        if self.drop_after_puts == Some(self.successful_puts) {
            return Err(UplinkError::Unreachable("link dropped".into()));
        }
        self.observed.push(chunk.chunk_key.clone());
        match self.stored.get(&chunk.chunk_key) {
            Some(d) if *d != chunk.digest => {
                return Err(UplinkError::DigestMismatch(chunk.chunk_key.to_string()))
            }
            _ => {
                self.stored.insert(chunk.chunk_key.clone(), chunk.digest.clone());
            }
        }
        self.successful_puts += 1;
        Ok(ChunkAck {
            chunk_key: chunk.chunk_key.clone(),
            digest: chunk.digest.clone(),
        })
    }

    fn finalize_trip(&mut self, _token: &str, _s: &ScooterId, trip_id: &TripId, count: u32) -> Result<FinalizeOutcome, UplinkError> {
        if self.drop_after_puts == Some(self.successful_puts) {
            return Err(UplinkError::Unreachable("link dropped".into()));
        }
        self.finalized.push((trip_id.clone(), count));
        Ok(FinalizeOutcome::Complete)
    }

    fn fetch_config(&mut self, _token: &str, _s: &ScooterId, current: u64, hb: Heartbeat) -> Result<Option<ScooterConfig>, UplinkError> {
        if self.reject_auth {
            return Err(UplinkError::Auth);
        }
        self.heartbeats.push(hb);
        Ok(self.config.clone().filter(|c| c.version > current))
    }
}

fn config(version: u64, rates: &[(SensorKind, f64)]) -> ScooterConfig {
    ScooterConfig {
        scooter_id: "s01".into(),
        version,
        policy: DataCollectionPolicy::simple(rates.iter().cloned()).unwrap(),
        issued_at: Timestamp(T0),
        project_id: None,
    }
}

fn agent_with(store: Box<dyn AgentStore>, limits: AgentLimits) -> NodeAgent {
    NodeAgent::open("s01".into(), "tok", store, limits).unwrap()
}

/// Drives the agent at 100 ms steps with a constant speed.
fn drive(agent: &mut NodeAgent, source: &mut ConstSource, from_ms: i64, to_ms: i64, speed: f64) -> Vec<(SensorSample, Disposition)> {
    let mut all = Vec::new();
    let mut t = from_ms;
    while t < to_ms {
        let now = Timestamp(T0 + t);
        agent.observe_speed(now, speed).unwrap();
        all.extend(agent.sample_tick(now, source).unwrap().samples);
        t += 100;
    }
    all
}

/// One complete trip: 30 s riding, then enough stillness to close it.
fn ride_trip(agent: &mut NodeAgent, source: &mut ConstSource, start_ms: i64) -> (Vec<(SensorSample, Disposition)>, i64) {
    let mut samples = drive(agent, source, start_ms, start_ms + 30_000, 3.0);
    samples.extend(drive(agent, source, start_ms + 30_000, start_ms + 151_000, 0.0));
    assert_eq!(*agent.ride(), RideState::Idle);
    (samples, start_ms + 151_000)
}

#[test]
fn disabled_camera_never_sampled() {
    let mut agent = agent_with(Box::new(MemoryStore::new()), AgentLimits::default());
    agent.provision(config(1, &[(SensorKind::Gps, 1.0)])).unwrap();
    let mut src = ConstSource::new();
    let (samples, _) = ride_trip(&mut agent, &mut src, 0);
    assert!(!samples.is_empty());
    assert!(samples.iter().all(|(s, _)| s.kind == SensorKind::Gps));
}

#[test]
fn source_failure_counts_dropouts() {
    let mut agent = agent_with(Box::new(MemoryStore::new()), AgentLimits::default());
    agent
        .provision(config(1, &[(SensorKind::Gps, 1.0), (SensorKind::Temperature, 1.0)]))
        .unwrap();
    let mut src = ConstSource::new();
    src.fail.push(SensorKind::Temperature);
    let samples = drive(&mut agent, &mut src, 0, 20_000, 3.0);
    assert!(samples.iter().all(|(s, _)| s.kind == SensorKind::Gps));
    assert!(agent.counters().dropouts[&SensorKind::Temperature] > 10);
}

#[test]
fn size_limit_seal_advances_seq() {
    let limits = AgentLimits {
        max_chunk_samples: usize::MAX,
        max_chunk_age_ms: i64::MAX,
        ..Default::default()
    };
    let mut agent = agent_with(Box::new(MemoryStore::new()), limits);
    agent.provision(config(1, &[(SensorKind::Accelerometer, 100.0)])).unwrap();
    let mut src = ConstSource::new();
    drive(&mut agent, &mut src, 0, 3_100, 3.0);
    let t = 3_100;
    // first chunk from whatever has accumulated
    agent.seal_chunk(SealReason::SizeLimit, Timestamp(T0 + t)).unwrap();
    let mut now = T0 + t;
    while agent.buffered_samples() < 5_000 {
        now += 10;
        agent.sample_tick(Timestamp(now), &mut src).unwrap();
    }
    let events = agent.seal_chunk(SealReason::SizeLimit, Timestamp(now)).unwrap();
    match &events[..] {
        [AgentEvent::ChunkSealed { chunk_key, samples, .. }] => {
            assert_eq!(chunk_key.seq, 1);
            assert_eq!(*samples, 5_000);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn default_limits_seal_at_4096_samples_or_60_seconds() {
    let mut agent = agent_with(Box::new(MemoryStore::new()), AgentLimits::default());
    agent.provision(config(1, &[(SensorKind::Temperature, 1.0)])).unwrap();
    let mut src = ConstSource::new();
    drive(&mut agent, &mut src, 0, 3_100, 3.0);
    let mut sealed = Vec::new();
    let mut t = 3_100;
    while sealed.is_empty() {
        let now = Timestamp(T0 + t);
        agent.observe_speed(now, 3.0).unwrap();
        sealed = agent.sample_tick(now, &mut src).unwrap().events;
        t += 100;
    }
    assert!(matches!(sealed[0], AgentEvent::ChunkSealed { reason: SealReason::TimeLimit, samples: 60, .. }), "{sealed:?}");

    let mut agent = agent_with(Box::new(MemoryStore::new()), AgentLimits::default());
    agent.provision(config(1, &[(SensorKind::Accelerometer, 100.0)])).unwrap();
    drive(&mut agent, &mut src, 0, 3_100, 3.0);
    let mut now = T0 + 3_100;
    let events = loop {
        now += 10;
        let out = agent.sample_tick(Timestamp(now), &mut src).unwrap();
        if !out.events.is_empty() {
            break out.events;
        }
    };
    assert!(matches!(events[0], AgentEvent::ChunkSealed { reason: SealReason::SizeLimit, samples: 4_096, .. }));
}

#[test]
fn trip_end_with_empty_buffer_only_emits_marker() {
    let limits = AgentLimits {
        max_chunk_samples: usize::MAX,
        max_chunk_age_ms: i64::MAX,
        ..Default::default()
    };
    let mut agent = agent_with(Box::new(MemoryStore::new()), limits);
    agent.provision(config(1, &[(SensorKind::Gps, 1.0)])).unwrap();
    let mut src = ConstSource::new();
    drive(&mut agent, &mut src, 0, 3_100, 3.0);
    for i in 0..3 {
        let now = T0 + 3_100 + i * 1_000;
        agent.sample_tick(Timestamp(now), &mut src).unwrap();
        agent.seal_chunk(SealReason::TimeLimit, Timestamp(now)).unwrap();
    }
    assert_eq!(agent.current_trip().unwrap().next_seq, 3);
    // stop sampling: the stillness period is observed without sample ticks
    let mut events = Vec::new();
    let mut t = 6_000;
    while *agent.ride() != RideState::Idle {
        events.extend(agent.observe_speed(Timestamp(T0 + t), 0.0).unwrap());
        t += 100;
    }
    assert!(!events.iter().any(|e| matches!(e, AgentEvent::ChunkSealed { .. })));
    assert!(events.contains(&AgentEvent::TripEnded {
        trip_id: "s01-t00001".into(),
        ended_at: Timestamp(T0 + 6_000),
        chunk_count: 3
    }));
    assert_eq!(agent.pending_chunks(), 3);
}

#[test]
fn sealed_chunk_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let mut agent = agent_with(Box::new(FileStore::open(dir.path()).unwrap()), AgentLimits::default());
    agent.provision(config(1, &[(SensorKind::Gps, 1.0)])).unwrap();
    let mut src = ConstSource::new();
    drive(&mut agent, &mut src, 0, 10_000, 3.0);
    agent.seal_chunk(SealReason::TimeLimit, Timestamp(T0 + 10_000)).unwrap();
    let buffered = drive(&mut agent, &mut src, 10_000, 13_000, 3.0).len();
    let before: Vec<_> = agent.outbox().map(|e| e.chunk.clone()).collect();
    drop(agent);

    let agent = agent_with(Box::new(FileStore::open(dir.path()).unwrap()), AgentLimits::default());
    let after: Vec<_> = agent.outbox().map(|e| e.chunk.clone()).collect();
    assert_eq!(before, after);
    assert!(after.iter().all(|c| c.verify().is_ok()));
    assert_eq!(agent.buffered_samples(), buffered);
    assert_eq!(agent.current_trip().unwrap().next_seq, 1);
    assert!(matches!(agent.ride(), RideState::Recording(_)));
    assert_eq!(agent.active_config().unwrap().version, 1);
}

fn agent_with_three_chunks() -> NodeAgent {
    let limits = AgentLimits {
        max_chunk_samples: 10,
        ..Default::default()
    };
    let mut agent = agent_with(Box::new(MemoryStore::new()), limits);
    agent.provision(config(1, &[(SensorKind::Gps, 1.0)])).unwrap();
    let mut src = ConstSource::new();
    // 3 s to start, then 30 fixes -> exactly three chunks of 10
    drive(&mut agent, &mut src, 0, 3_000, 3.0);
    drive(&mut agent, &mut src, 3_000, 33_000, 3.0);
    drive(&mut agent, &mut src, 33_000, 154_000, 0.0);
    assert_eq!(*agent.ride(), RideState::Idle);
    agent
}

#[test]
fn offline_sync_is_a_no_op() {
    let mut agent = agent_with_three_chunks();
    let pending = agent.pending_chunks();
    assert!(pending >= 3);
    let mut server = FakeServer::default();
    let report = agent.sync(false, &mut server).unwrap();
    assert_eq!((report.sent, report.acked, report.failed), (0, 0, 0));
    assert_eq!(agent.pending_chunks(), pending);
    assert!(server.observed.is_empty());
}

#[test]
fn online_sync_drains_the_outbox() {
    let mut agent = agent_with_three_chunks();
    let n = agent.pending_chunks();
    let mut server = FakeServer::default();
    let report = agent.sync(true, &mut server).unwrap();
    assert_eq!((report.sent, report.acked, report.failed), (n, n, 0));
    assert_eq!(agent.outbox().count(), 0);
    assert_eq!(server.stored.len(), n);
    assert_eq!(server.finalized, vec![("s01-t00001".into(), n as u32)]);
    assert!(!agent.has_unsent_work());
}

#[test]
fn link_drop_resumes_without_duplicates() {
    let mut agent = agent_with_three_chunks();
    let n = agent.pending_chunks();
    let mut server = FakeServer {
        drop_after_puts: Some(2),
        ..Default::default()
    };
    let report = agent.sync(true, &mut server).unwrap();
    assert_eq!((report.acked, report.failed), (2, 1));
    server.drop_after_puts = None;
    let report = agent.sync(true, &mut server).unwrap();
    assert_eq!(report.sent, n - 2);
    // replay the server's request log: every chunk observed exactly once
    let mut seen = server.observed.clone();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), server.observed.len());
    assert_eq!(server.stored.len(), n);
}

#[test]
fn digest_mismatch_quarantines() {
    let mut agent = agent_with_three_chunks();
    let mut server = FakeServer::default();
    let first = agent.outbox().next().unwrap().chunk.chunk_key.clone();
    server.stored.insert(first.clone(), "bogus".into());
    let report = agent.sync(true, &mut server).unwrap();
    assert_eq!(agent.counters().quarantined, 1);
    assert!(report
        .events
        .iter()
        .any(|e| matches!(e, UploadEvent::ChunkQuarantined { chunk_key, .. } if *chunk_key == first)));
}

#[test]
fn auth_failure_suspends_until_refresh() {
    let mut agent = agent_with_three_chunks();
    let mut server = FakeServer {
        reject_auth: true,
        ..Default::default()
    };
    agent.sync(true, &mut server).unwrap();
    assert!(agent.uploads_suspended());
    server.reject_auth = false;
    let report = agent.sync(true, &mut server).unwrap();
    assert_eq!(report.sent, 0);
    agent.refresh_config(&mut server).unwrap();
    assert!(!agent.uploads_suspended());
    assert!(agent.sync(true, &mut server).unwrap().acked > 0);
}

#[test]
fn newer_config_waits_for_trip_boundary() {
    let mut agent = agent_with(Box::new(MemoryStore::new()), AgentLimits::default());
    agent
        .provision(config(4, &[(SensorKind::Gps, 1.0), (SensorKind::Temperature, 1.0)]))
        .unwrap();
    let mut src = ConstSource::new();
    let mut server = FakeServer {
        config: Some(config(5, &[(SensorKind::Temperature, 1.0)])),
        ..Default::default()
    };
    let first = drive(&mut agent, &mut src, 0, 20_000, 3.0);
    let (outcome, _) = agent.refresh_config(&mut server).unwrap();
    assert_eq!(outcome, ConfigOutcome::Deferred(5));
    assert_eq!(agent.active_config().unwrap().version, 4);
    let mut rest = drive(&mut agent, &mut src, 20_000, 40_000, 3.0);
    rest.extend(drive(&mut agent, &mut src, 40_000, 170_000, 0.0));
    assert_eq!(agent.active_config().unwrap().version, 5);
    // the first trip kept GPS throughout
    assert!(first.iter().chain(&rest).any(|(s, _)| s.kind == SensorKind::Gps && s.t.0 > T0 + 20_000));
    let (next, _) = ride_trip(&mut agent, &mut src, 200_000);
    assert!(!next.is_empty());
    assert!(next.iter().all(|(s, _)| s.kind != SensorKind::Gps));
    let versions: Vec<u64> = agent.outbox().map(|e| e.chunk.config_version).collect();
    assert!(versions.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(versions.last(), Some(&5));
}

#[test]
fn stale_and_misaddressed_configs_are_rejected() {
    let mut agent = agent_with(Box::new(MemoryStore::new()), AgentLimits::default());
    agent.provision(config(5, &[(SensorKind::Gps, 1.0)])).unwrap();
    assert_eq!(
        agent.provision(config(4, &[(SensorKind::Gps, 1.0)])).unwrap(),
        ConfigOutcome::RejectedStale(4)
    );
    let mut other = config(6, &[(SensorKind::Gps, 1.0)]);
    other.scooter_id = "s99".into();
    assert!(matches!(agent.provision(other).unwrap(), ConfigOutcome::RejectedMalformed(_)));
    assert_eq!(agent.counters().alerts, 1);
    assert_eq!(agent.active_config().unwrap().version, 5);
}

#[test]
fn refresh_reports_heartbeat() {
    let mut agent = agent_with(Box::new(MemoryStore::new()), AgentLimits::default());
    agent.set_vehicle_state(75.0, 16_093.5);
    let mut server = FakeServer::default();
    assert_eq!(agent.refresh_config(&mut server).unwrap().0, ConfigOutcome::NoChange);
    assert_eq!(server.heartbeats, vec![Heartbeat { battery_pct: 75.0, odometer_m: 16_093.5 }]);
}

#[test]
fn battery_range_estimate() {
    let mut agent = agent_with(Box::new(MemoryStore::new()), AgentLimits::default());
    assert_eq!(agent.battery_status().est_range_miles, 40.0);
    agent.set_vehicle_state(0.0, 0.0);
    assert_eq!(agent.battery_status().est_range_miles, 0.0);
}

#[test]
fn fenced_policy_suppresses_outside_and_before_first_fix() {
    let fence = GeoFence::rectangle(
        GeoPoint::new(29.58, -98.62).unwrap(),
        GeoPoint::new(29.59, -98.61).unwrap(),
    )
    .unwrap();
    let rates: BTreeMap<_, _> = [(SensorKind::Gps, 1.0), (SensorKind::Temperature, 2.0)].into_iter().collect();
    let policy = DataCollectionPolicy::new(rates, Some(fence), Schedule::always()).unwrap();
    assert_eq!(gate(&policy, None, Timestamp(T0)), Disposition::Suppressed);

    let mut agent = agent_with(Box::new(MemoryStore::new()), AgentLimits::default());
    agent
        .provision(ScooterConfig {
            policy,
            ..config(1, &[(SensorKind::Gps, 1.0)])
        })
        .unwrap();
    let mut src = ConstSource::new();
    let inside = drive(&mut agent, &mut src, 0, 10_000, 3.0);
    assert!(inside.iter().all(|(_, d)| *d == Disposition::Recorded));
    src.fix = GeoPoint::new(29.60, -98.60).unwrap();
    let outside = drive(&mut agent, &mut src, 10_000, 20_000, 3.0);
    assert!(!outside.is_empty());
    assert!(outside.iter().all(|(_, d)| *d == Disposition::Suppressed));
    let recorded_in_buffer = agent.buffered_samples();
    assert_eq!(recorded_in_buffer, inside.len());
}

#[test]
fn storage_pressure_drops_blobs_first() {
    let limits = AgentLimits {
        max_chunk_samples: 20,
        storage_capacity_bytes: Some(6_000),
        ..Default::default()
    };
    let mut agent = agent_with(Box::new(MemoryStore::new()), limits);
    agent
        .provision(config(1, &[(SensorKind::Gps, 1.0), (SensorKind::Camera, 1.0)]))
        .unwrap();
    let mut src = ConstSource::new();
    let mut events = Vec::new();
    let mut t = 0;
    while t < 60_000 {
        let now = Timestamp(T0 + t);
        events.extend(agent.observe_speed(now, 3.0).unwrap());
        events.extend(agent.sample_tick(now, &mut src).unwrap().events);
        t += 100;
    }
    let dropped: usize = events
        .iter()
        .map(|e| match e {
            AgentEvent::StoragePressure { dropped, .. } => {
                assert!(dropped.iter().all(|s| s.kind == SensorKind::Camera));
                dropped.len()
            }
            _ => 0,
        })
        .sum();
    assert!(dropped > 0);
    assert_eq!(agent.counters().storage_drops, dropped as u64);
}
