use std::collections::BTreeSet;

use super::enrich::{DownProvider, FixedProvider, Payload};
use super::*;
use crate::geo::destination;
use crate::model::{
    EnrichmentSource, EnrichmentStatus, GeoPoint, PayloadValue, ProjectState, SampleValue,
    SensorKind, SensorSample, DAY_MS,
};

const T0: i64 = 1_741_009_800_000;

fn fc() -> FleetController {
    let mut fc = FleetController::in_memory("secret", Vec::new());
    for id in ["s01", "s02"] {
        fc.register_scooter(Scooter::new(id.into(), "Segway G30 Max", 100.0).unwrap())
            .unwrap();
    }
    fc
}

fn fixes(trip: &str, from_s: i64, n: i64) -> Vec<SensorSample> {
    let origin = GeoPoint::new(29.5812, -98.6195).unwrap();
    (from_s..from_s + n)
        .map(|i| SensorSample {
            scooter_id: "s01".into(),
            trip_id: trip.into(),
            kind: SensorKind::Gps,
            t: Timestamp(T0 + i * 1_000),
            value: SampleValue::Fix {
                position: destination(origin, 90.0, 5.0 * i as f64),
                speed_mps: 5.0,
                heading_deg: 90.0,
                hdop: 1.0,
            },
        })
        .collect()
}

fn chunk(trip: &str, seq: u32, version: u64) -> TripChunk {
    TripChunk::seal(
        ChunkKey {
            scooter_id: "s01".into(),
            trip_id: trip.into(),
            seq,
        },
        fixes(trip, seq as i64 * 10, 10),
        Timestamp(T0 + (seq as i64 + 1) * 10_000),
        version,
    )
}

#[test]
fn fresh_and_repeated_chunks() {
    let mut fc = fc();
    let tok = fc.scooter_token(&"s01".into());
    let c = chunk("s01-t00001", 0, 0);
    let first = fc.receive_chunk(&tok, c.clone(), Timestamp(T0)).unwrap();
    assert_eq!(fc.stored_chunk_count(), 1);
    let second = fc.receive_chunk(&tok, c.clone(), Timestamp(T0)).unwrap();
    assert_eq!(first, second);
    assert_eq!(fc.stored_chunk_count(), 1);
    assert_eq!(fc.stats().duplicate_chunks, 1);

    let mut altered = c.clone();
    altered.samples.pop();
    altered = TripChunk::seal(altered.chunk_key, altered.samples, altered.sealed_at, 0);
    let err = fc.receive_chunk(&tok, altered, Timestamp(T0)).unwrap_err();
    assert!(matches!(err, FcError::DigestMismatch(_)));
    assert_eq!(fc.quarantine().len(), 1);
    assert_eq!(fc.stored_chunk(&c.chunk_key).unwrap(), &c);
}

#[test]
fn bad_token_and_malformed_chunks() {
    let mut fc = fc();
    let c = chunk("s01-t00001", 0, 0);
    let other = fc.scooter_token(&"s02".into());
    assert!(matches!(fc.receive_chunk(&other, c.clone(), Timestamp(T0)), Err(FcError::Auth)));
    let tok = fc.scooter_token(&"s01".into());
    let mut forged = c.clone();
    forged.digest = "00".repeat(32);
    assert!(matches!(
        fc.receive_chunk(&tok, forged, Timestamp(T0)),
        Err(FcError::MalformedChunk(_))
    ));
    assert_eq!(fc.stored_chunk_count(), 0);
}

#[test]
fn finalize_complete_awaiting_and_conflict() {
    let mut fc = fc();
    let tok = fc.scooter_token(&"s01".into());
    let s01: ScooterId = "s01".into();
    for seq in 0..3 {
        fc.receive_chunk(&tok, chunk("s01-t00001", seq, 0), Timestamp(T0)).unwrap();
    }
    let out = fc.finalize_trip(&tok, &s01, &"s01-t00001".into(), 3, Timestamp(T0)).unwrap();
    assert_eq!(out, FinalizeOutcome::Complete);
    assert!(fc.trip(&"s01-t00001".into()).is_some());

    for seq in [0, 2] {
        fc.receive_chunk(&tok, chunk("s01-t00002", seq, 0), Timestamp(T0)).unwrap();
    }
    let out = fc.finalize_trip(&tok, &s01, &"s01-t00002".into(), 3, Timestamp(T0)).unwrap();
    assert_eq!(out, FinalizeOutcome::AwaitingChunks(vec![1]));
    assert!(fc.trip(&"s01-t00002".into()).is_none());
    fc.receive_chunk(&tok, chunk("s01-t00002", 1, 0), Timestamp(T0)).unwrap();
    let trip = fc.trip(&"s01-t00002".into()).unwrap();
    assert_eq!(trip.sample_total(), 30);
    assert!((trip.distance_m - 145.0).abs() < 1e-3);

    let err = fc.finalize_trip(&tok, &s01, &"s01-t00002".into(), 4, Timestamp(T0)).unwrap_err();
    assert!(matches!(err, FcError::FinalizeConflict { .. }));
    assert!(fc.quarantined_trips().contains_key(&(s01, "s01-t00002".into())));
    assert!(fc.trip(&"s01-t00002".into()).is_none());
}

#[test]
fn trips_link_project_through_config_version() {
    let mut fc = fc();
    let s01: ScooterId = "s01".into();
    let policy = DataCollectionPolicy::simple([(SensorKind::Gps, 1.0)]).unwrap();
    fc.issue_config(&s01, policy, Some("p1".into()), Timestamp(T0)).unwrap();
    let tok = fc.scooter_token(&s01);
    let loan = fc
        .checkout(&"rider".into(), &s01, Acknowledgments::ALL, Timestamp(T0 - 1_000))
        .unwrap();
    fc.receive_chunk(&tok, chunk("s01-t00001", 0, 1), Timestamp(T0)).unwrap();
    fc.finalize_trip(&tok, &s01, &"s01-t00001".into(), 1, Timestamp(T0)).unwrap();
    let trip = fc.trip(&"s01-t00001".into()).unwrap();
    assert_eq!(trip.project_id, Some("p1".into()));
    assert_eq!(trip.loan_id, Some(loan.loan_id));
}

#[test]
fn config_versions_and_polling() {
    let mut fc = fc();
    let s01: ScooterId = "s01".into();
    let tok = fc.scooter_token(&s01);
    let gps = DataCollectionPolicy::simple([(SensorKind::Gps, 1.0)]).unwrap();
    assert_eq!(fc.issue_config(&s01, gps.clone(), None, Timestamp(T0)).unwrap().version, 1);
    assert_eq!(fc.issue_config(&s01, gps.clone(), None, Timestamp(T0)).unwrap().version, 2);

    let bad: PolicyDraft = serde_json::from_value(serde_json::json!({
        "sensors": {"gps": 50.0},
        "schedule": {"active_from": "2025-01-01", "active_until": "2025-12-31", "windows": []}
    }))
    .unwrap();
    assert!(matches!(
        fc.issue_config_draft(&s01, &bad, None, Timestamp(T0)),
        Err(FcError::InvalidPolicy(_))
    ));
    assert_eq!(fc.current_config(&s01).unwrap().version, 2);
    assert!(matches!(
        fc.issue_config(&"nope".into(), gps, None, Timestamp(T0)),
        Err(FcError::UnknownScooter(_))
    ));

    assert_eq!(fc.get_config(&tok, &s01, 1, None, Timestamp(T0)).unwrap().unwrap().version, 2);
    assert!(fc.get_config(&tok, &s01, 2, None, Timestamp(T0)).unwrap().is_none());
    assert!(fc.get_config(&tok, &s01, 9, None, Timestamp(T0)).unwrap().is_none());
    assert_eq!(fc.config_anomalies(&s01), 1);
}

#[test]
fn heartbeats_feed_battery_levels() {
    let mut fc = fc();
    let s01: ScooterId = "s01".into();
    let tok = fc.scooter_token(&s01);
    assert_eq!(fc.battery_level(&s01).unwrap().status, BatteryReading::Unknown);
    let hb = Heartbeat {
        battery_pct: 75.0,
        odometer_m: 16_093.5,
    };
    fc.get_config(&tok, &s01, 0, Some(hb), Timestamp(T0)).unwrap();
    let level = fc.battery_level(&s01).unwrap();
    assert_eq!(level.battery_pct, Some(75.0));
    assert_eq!(level.est_range_miles, Some(30.0));
    assert_eq!(fc.scooter(&s01).unwrap().odometer_m, 16_093.5);
}

#[test]
fn loan_lifecycle() {
    let mut fc = fc();
    let s01: ScooterId = "s01".into();
    let rider: UserId = "r1".into();
    let missing = Acknowledgments {
        consent: false,
        ..Acknowledgments::ALL
    };
    match fc.checkout(&rider, &s01, missing, Timestamp(T0)) {
        Err(FcError::MissingAcknowledgment(which)) => assert_eq!(which, vec!["consent"]),
        other => panic!("{other:?}"),
    }
    let loan = fc.checkout(&rider, &s01, Acknowledgments::ALL, Timestamp(T0)).unwrap();
    assert_eq!(loan.due_at.millis() - loan.started_at.millis(), 14 * DAY_MS);
    assert!(matches!(
        fc.checkout(&rider, &s01, Acknowledgments::ALL, Timestamp(T0)),
        Err(FcError::ScooterUnavailable(_))
    ));
    let day10 = Timestamp(T0 + 10 * DAY_MS);
    assert!(matches!(
        fc.renew(&loan.loan_id, Acknowledgments::default(), day10),
        Err(FcError::MissingAcknowledgment(_))
    ));
    let renewed = fc.renew(&loan.loan_id, Acknowledgments::ALL, day10).unwrap();
    assert_eq!(renewed.due_at, Timestamp(T0 + 24 * DAY_MS));

    let status = fc.return_and_inspect(&loan.loan_id, false, Timestamp(T0 + 11 * DAY_MS)).unwrap();
    assert_eq!(status, ScooterStatus::Maintenance);
    assert!(matches!(
        fc.return_and_inspect(&loan.loan_id, true, Timestamp(T0 + 11 * DAY_MS)),
        Err(FcError::LoanNotActive(_))
    ));
    assert!(matches!(
        fc.renew(&loan.loan_id, Acknowledgments::ALL, Timestamp(T0 + 12 * DAY_MS)),
        Err(FcError::LoanNotActive(_))
    ));
    assert!(matches!(
        fc.checkout(&rider, &s01, Acknowledgments::ALL, Timestamp(T0 + 12 * DAY_MS)),
        Err(FcError::ScooterUnavailable(_))
    ));
    assert_eq!(fc.inspect(&s01, true).unwrap(), ScooterStatus::Available);
    assert!(fc.checkout(&rider, &s01, Acknowledgments::ALL, Timestamp(T0 + 12 * DAY_MS)).is_ok());
}

#[test]
fn enrichment_failure_never_blocks_trips() {
    let providers: Vec<Box<dyn EnrichmentProvider>> = vec![Box::new(DownProvider {
        source: EnrichmentSource::Weather,
    })];
    let mut fc = FleetController::in_memory("secret", providers);
    fc.register_scooter(Scooter::new("s01".into(), "G30", 100.0).unwrap()).unwrap();
    let s01: ScooterId = "s01".into();
    let tok = fc.scooter_token(&s01);
    fc.receive_chunk(&tok, chunk("s01-t00001", 0, 0), Timestamp(T0)).unwrap();
    fc.finalize_trip(&tok, &s01, &"s01-t00001".into(), 1, Timestamp(T0)).unwrap();
    let statuses = |fc: &FleetController| -> Vec<EnrichmentStatus> {
        fc.trip(&"s01-t00001".into()).unwrap().enrichment.iter().map(|r| r.status).collect()
    };
    assert_eq!(statuses(&fc), vec![EnrichmentStatus::Pending]);
    assert_eq!(fc.enrichment_sweep(Timestamp(T0)).unwrap(), 1);
    assert_eq!(statuses(&fc), vec![EnrichmentStatus::Pending]);
    fc.enrichment_sweep(Timestamp(T0)).unwrap();
    assert_eq!(statuses(&fc), vec![EnrichmentStatus::Failed]);
    assert_eq!(fc.enrichment_sweep(Timestamp(T0)).unwrap(), 0);
}

#[test]
fn fixed_weather_attaches() {
    let payload: Payload = [("temp_c".to_owned(), PayloadValue::Number(31.0))].into();
    let providers: Vec<Box<dyn EnrichmentProvider>> = vec![Box::new(FixedProvider {
        source: EnrichmentSource::Weather,
        payload: payload.clone(),
    })];
    let mut fc = FleetController::in_memory("secret", providers);
    fc.register_scooter(Scooter::new("s01".into(), "G30", 100.0).unwrap()).unwrap();
    let s01: ScooterId = "s01".into();
    let tok = fc.scooter_token(&s01);
    fc.receive_chunk(&tok, chunk("s01-t00001", 0, 0), Timestamp(T0)).unwrap();
    fc.finalize_trip(&tok, &s01, &"s01-t00001".into(), 1, Timestamp(T0)).unwrap();
    let e = &fc.trip(&"s01-t00001".into()).unwrap().enrichment;
    assert_eq!(e.len(), 1);
    assert_eq!(e[0].payload, payload);
}

#[test]
fn journal_replay_restores_state() {
    let journal = MemoryJournal::new();
    let mut fc = FleetController::open(Box::new(journal.clone()), "k", Vec::new()).unwrap();
    let s01: ScooterId = "s01".into();
    fc.register_scooter(Scooter::new(s01.clone(), "G30", 100.0).unwrap()).unwrap();
    let tok = fc.scooter_token(&s01);
    let gps = DataCollectionPolicy::simple([(SensorKind::Gps, 1.0)]).unwrap();
    fc.issue_config(&s01, gps, None, Timestamp(T0)).unwrap();
    fc.receive_chunk(&tok, chunk("s01-t00001", 0, 1), Timestamp(T0)).unwrap();
    fc.finalize_trip(&tok, &s01, &"s01-t00001".into(), 2, Timestamp(T0)).unwrap();
    let loan = fc.checkout(&"r".into(), &s01, Acknowledgments::ALL, Timestamp(T0)).unwrap();
    fc.put_project(Project {
        project_id: "p1".into(),
        owner: "u1".into(),
        title: "t".into(),
        policy: DataCollectionPolicy::simple([(SensorKind::Gps, 1.0)]).unwrap(),
        fleet: BTreeSet::from([s01.clone()]),
        state: ProjectState::Draft,
    })
    .unwrap();
    drop(fc);

    let mut fc = FleetController::open(Box::new(journal), "k", Vec::new()).unwrap();
    assert_eq!(fc.current_config(&s01).unwrap().version, 1);
    assert_eq!(fc.scooter(&s01).unwrap().status, ScooterStatus::Loaned);
    assert!(fc.loan(&loan.loan_id).unwrap().is_active());
    assert!(fc.project(&"p1".into()).is_some());
    // the straggler still completes the trip after a restart
    fc.receive_chunk(&tok, chunk("s01-t00001", 1, 1), Timestamp(T0)).unwrap();
    assert_eq!(fc.trip(&"s01-t00001".into()).unwrap().sample_total(), 20);
}

#[test]
fn file_journal_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s01: ScooterId = "s01".into();
    {
        let mut fc = FleetController::open(Box::new(FileJournal::open(dir.path()).unwrap()), "k", Vec::new()).unwrap();
        fc.register_scooter(Scooter::new(s01.clone(), "G30", 100.0).unwrap()).unwrap();
        let tok = fc.scooter_token(&s01);
        fc.receive_chunk(&tok, chunk("s01-t00001", 0, 0), Timestamp(T0)).unwrap();
        fc.finalize_trip(&tok, &s01, &"s01-t00001".into(), 1, Timestamp(T0)).unwrap();
        fc.flush().unwrap();
    }
    let fc = FleetController::open(Box::new(FileJournal::open(dir.path()).unwrap()), "k", Vec::new()).unwrap();
    assert_eq!(fc.trip_count(), 1);
    assert_eq!(fc.stored_chunk_count(), 1);
}

#[test]
fn census_counts_stored_samples_once() {
    let mut fc = fc();
    let s01: ScooterId = "s01".into();
    let tok = fc.scooter_token(&s01);
    let c = chunk("s01-t00001", 0, 0);
    fc.receive_chunk(&tok, c.clone(), Timestamp(T0)).unwrap();
    fc.receive_chunk(&tok, c.clone(), Timestamp(T0)).unwrap();
    let census = fc.census(&[(s01, "s01-t00001".into())]);
    assert_eq!(census, Census::of(&c.samples));
    assert_eq!(census.samples, 10);
}
