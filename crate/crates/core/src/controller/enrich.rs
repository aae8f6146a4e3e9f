//! Weather and traffic context keyed by grid cell and UTC hour.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    EnrichmentRecord, EnrichmentSource, EnrichmentStatus, GeoPoint, GridHour, PayloadValue,
    SensorKind, Timestamp, Trip, HOUR_MS,
};

/// Failed sweeps after which a pending record becomes `Failed`.
pub const MAX_ENRICH_ATTEMPTS: u32 = 3;

pub type Payload = BTreeMap<String, PayloadValue>;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("provider unavailable: {0}")]
pub struct ProviderError(pub String);

pub trait EnrichmentProvider: Send {
    fn source(&self) -> EnrichmentSource;
    fn lookup(&self, at: &GridHour) -> Result<Payload, ProviderError>;
}

/// Deterministic synthetic values derived from a seed.
#[derive(Debug, Clone)]
pub struct StubProvider {
    pub source: EnrichmentSource,
    pub seed: u64,
}

impl EnrichmentProvider for StubProvider {
    fn source(&self) -> EnrichmentSource {
        self.source
    }

    fn lookup(&self, at: &GridHour) -> Result<Payload, ProviderError> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(format!("{:?}|{}|{}", self.source, at.cell, at.hour.millis()));
        let d = h.finalize();
        let unit = |i: usize| u16::from_le_bytes([d[i], d[i + 1]]) as f64 / u16::MAX as f64;
        let round1 = |x: f64| (x * 10.0).round() / 10.0;
        let mut p = Payload::new();
        match self.source {
            EnrichmentSource::Weather => {
                const CONDITIONS: [&str; 4] = ["clear", "cloudy", "rain", "wind"];
                p.insert("temp_c".into(), PayloadValue::Number(round1(10.0 + 28.0 * unit(0))));
                p.insert("humidity_pct".into(), PayloadValue::Number(round1(20.0 + 70.0 * unit(2))));
                p.insert(
                    "condition".into(),
                    PayloadValue::Text(CONDITIONS[d[4] as usize % CONDITIONS.len()].into()),
                );
            }
            EnrichmentSource::Traffic => {
                p.insert("congestion_index".into(), PayloadValue::Number(round1(unit(0) * 10.0) / 10.0));
                p.insert("avg_speed_kph".into(), PayloadValue::Number(round1(15.0 + 45.0 * unit(2))));
            }
        }
        Ok(p)
    }
}

/// Always answers with the same payload.
#[derive(Debug, Clone)]
pub struct FixedProvider {
    pub source: EnrichmentSource,
    pub payload: Payload,
}

impl EnrichmentProvider for FixedProvider {
    fn source(&self) -> EnrichmentSource {
        self.source
    }

    fn lookup(&self, _at: &GridHour) -> Result<Payload, ProviderError> {
        Ok(self.payload.clone())
    }
}

/// Never available.
#[derive(Debug, Clone)]
pub struct DownProvider {
    pub source: EnrichmentSource,
}

impl EnrichmentProvider for DownProvider {
    fn source(&self) -> EnrichmentSource {
        self.source
    }

    fn lookup(&self, _at: &GridHour) -> Result<Payload, ProviderError> {
        Err(ProviderError(format!("{:?} feed down", self.source)))
    }
}

/// Builds providers from a selector: `stub`, `down` or `none`.
pub fn providers_from_name(name: &str, seed: u64) -> Result<Vec<Box<dyn EnrichmentProvider>>, String> {
    let sources = [EnrichmentSource::Weather, EnrichmentSource::Traffic];
    match name {
        "stub" => Ok(sources
            .into_iter()
            .map(|source| Box::new(StubProvider { source, seed }) as Box<dyn EnrichmentProvider>)
            .collect()),
        "down" => Ok(sources
            .into_iter()
            .map(|source| Box::new(DownProvider { source }) as Box<dyn EnrichmentProvider>)
            .collect()),
        "none" => Ok(Vec::new()),
        other => Err(format!("unknown enrichment provider {other:?} (expected stub, down or none)")),
    }
}

/// Cell id of the 0.01 degree grid square containing `p`.
pub fn grid_cell(p: GeoPoint) -> String {
    let idx = |deg: f64| ((deg * 1e9).round() as i64).div_euclid(10_000_000);
    format!("{}:{}", idx(p.lat()), idx(p.lon()))
}

fn centroid(points: &[GeoPoint]) -> Option<GeoPoint> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let lat = points.iter().map(|p| p.lat()).sum::<f64>() / n;
    let lon = points.iter().map(|p| p.lon()).sum::<f64>() / n;
    GeoPoint::new(lat, lon).ok()
}

/// One grid cell per UTC hour the trip overlaps, at the centroid of that
/// hour's fixes. Hours without a fix fall back to the whole-trip centroid.
pub fn trip_grid_hours(trip: &Trip) -> Vec<GridHour> {
    let fixes: Vec<(Timestamp, GeoPoint)> = trip
        .samples
        .get(&SensorKind::Gps)
        .into_iter()
        .flatten()
        .filter_map(|s| s.value.position().map(|p| (s.t, p)))
        .collect();
    let all: Vec<GeoPoint> = fixes.iter().map(|(_, p)| *p).collect();
    let Some(overall) = centroid(&all) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut hour = trip.started_at.hour_floor();
    while hour <= trip.ended_at {
        let in_hour: Vec<GeoPoint> = fixes
            .iter()
            .filter(|(t, _)| t.hour_floor() == hour)
            .map(|(_, p)| *p)
            .collect();
        let c = centroid(&in_hour).unwrap_or(overall);
        out.push(GridHour {
            cell: grid_cell(c),
            hour,
        });
        hour = hour.plus_ms(HOUR_MS);
    }
    out
}

pub type AttemptMap = BTreeMap<(EnrichmentSource, GridHour), u32>;

/// One enrichment sweep over a trip. Attached and failed records are left
/// alone; everything else is looked up again.
pub fn enrich_trip(
    trip: &mut Trip,
    providers: &[Box<dyn EnrichmentProvider>],
    attempts: &mut AttemptMap,
    now: Timestamp,
) {
    for valid_for in trip_grid_hours(trip) {
        for provider in providers {
            let source = provider.source();
            let existing = trip
                .enrichment
                .iter()
                .position(|r| r.source == source && r.valid_for == valid_for);
            if let Some(i) = existing {
                if trip.enrichment[i].status != EnrichmentStatus::Pending {
                    continue;
                }
            }
            let result = catch_unwind(AssertUnwindSafe(|| provider.lookup(&valid_for)))
                .unwrap_or_else(|_| Err(ProviderError("provider panicked".into())));
            let record = match result {
                Ok(payload) => {
                    attempts.remove(&(source, valid_for.clone()));
                    EnrichmentRecord {
                        source,
                        valid_for: valid_for.clone(),
                        payload,
                        fetched_at: now,
                        status: EnrichmentStatus::Attached,
                    }
                }
                Err(_) => {
                    let n = attempts.entry((source, valid_for.clone())).or_default();
                    *n += 1;
                    EnrichmentRecord {
                        source,
                        valid_for: valid_for.clone(),
                        payload: Payload::new(),
                        fetched_at: now,
                        status: if *n >= MAX_ENRICH_ATTEMPTS {
                            EnrichmentStatus::Failed
                        } else {
                            EnrichmentStatus::Pending
                        },
                    }
                }
            };
            match existing {
                Some(i) => trip.enrichment[i] = record,
                None => trip.enrichment.push(record),
            }
        }
    }
    trip.enrichment
        .sort_by(|a, b| (a.valid_for.hour, a.source, &a.valid_for.cell).cmp(&(b.valid_for.hour, b.source, &b.valid_for.cell)));
}

pub fn has_pending(trip: &Trip) -> bool {
    trip.enrichment.iter().any(|r| r.status == EnrichmentStatus::Pending)
}
