//! Trip assembly: merge chunks, sort, dedup and drop implausible fixes.

use std::collections::{BTreeMap, BTreeSet};

use crate::geo::{haversine_distance, trip_length};
use crate::model::{QualityFlag, SensorKind, SensorSample, Trip, TripChunk};

/// Fixes implying more than this speed from the previous kept fix are dropped.
pub const MAX_PLAUSIBLE_SPEED_MPS: f64 = 15.0;

/// Builds a trip from its chunks (any order). Links are left empty.
pub fn preprocess_trip(chunks: &[TripChunk]) -> Option<Trip> {
    let mut ordered: Vec<&TripChunk> = chunks.iter().collect();
    ordered.sort_by_key(|c| c.chunk_key.seq);
    let first = ordered.first()?;
    let samples = ordered.iter().flat_map(|c| c.samples.iter().cloned());
    let fallback = ordered.iter().map(|c| c.sealed_at).min().unwrap_or(first.sealed_at);
    let mut trip = Trip {
        trip_id: first.chunk_key.trip_id.clone(),
        scooter_id: first.chunk_key.scooter_id.clone(),
        loan_id: None,
        project_id: None,
        started_at: fallback,
        ended_at: fallback,
        samples: BTreeMap::new(),
        distance_m: 0.0,
        enrichment: Vec::new(),
        quality_flags: BTreeSet::new(),
    };
    clean_into(&mut trip, samples);
    Some(trip)
}

/// Runs the cleaning pipeline over an assembled trip again. Links,
/// enrichment and earlier flags are kept.
pub fn reprocess_trip(trip: &Trip) -> Trip {
    let mut out = trip.clone();
    let samples: Vec<SensorSample> = trip.samples.values().flatten().cloned().collect();
    out.samples.clear();
    clean_into(&mut out, samples);
    out
}

fn clean_into(trip: &mut Trip, samples: impl IntoIterator<Item = SensorSample>) {
    let mut by_kind: BTreeMap<SensorKind, Vec<SensorSample>> = BTreeMap::new();
    for s in samples {
        by_kind.entry(s.kind.clone()).or_default().push(s);
    }
    let mut dupes = false;
    for list in by_kind.values_mut() {
        list.sort_by_key(|s| s.t);
        let before = list.len();
        // exact duplicates share a timestamp, so they sit in one run
        let mut kept: Vec<SensorSample> = Vec::with_capacity(before);
        let mut run_start = 0;
        for s in list.drain(..) {
            if kept.last().is_none_or(|p: &SensorSample| p.t != s.t) {
                run_start = kept.len();
            }
            if !kept[run_start..].contains(&s) {
                kept.push(s);
            }
        }
        dupes |= kept.len() != before;
        *list = kept;
    }
    if dupes {
        trip.quality_flags.insert(QualityFlag::DuplicatesRemoved);
    }
    if let Some(fixes) = by_kind.get_mut(&SensorKind::Gps) {
        let before = fixes.len();
        let mut kept: Vec<SensorSample> = Vec::with_capacity(before);
        for s in fixes.drain(..) {
            let Some(pos) = s.value.position() else {
                continue;
            };
            let plausible = match kept.last() {
                None => true,
                Some(prev) => {
                    let d = haversine_distance(prev.value.position().expect("kept fixes have positions"), pos);
                    let dt = s.t.seconds_since(prev.t);
                    d <= MAX_PLAUSIBLE_SPEED_MPS * dt
                }
            };
            if plausible {
                kept.push(s);
            }
        }
        if kept.len() != before {
            trip.quality_flags.insert(QualityFlag::GpsOutliersRemoved);
        }
        *fixes = kept;
    }
    by_kind.retain(|_, v| !v.is_empty());

    let first = by_kind.values().filter_map(|v| v.first()).map(|s| s.t).min();
    let last = by_kind.values().filter_map(|v| v.last()).map(|s| s.t).max();
    if let (Some(a), Some(b)) = (first, last) {
        trip.started_at = a;
        trip.ended_at = b;
        trip.quality_flags.remove(&QualityFlag::EmptyTrip);
    } else {
        trip.quality_flags.insert(QualityFlag::EmptyTrip);
    }
    trip.samples = by_kind;
    trip.distance_m = trip_length(trip.gps_fixes());
}
