//! CSV, GeoJSON and JSON-lines export, and JSON-lines import.

use std::str::FromStr;

use serde_json::{json, Value};

use crate::controller::FleetController;
use crate::model::{SampleValue, SensorKind, Trip, TripId};

use super::query::{matching_trips, TripFilter, TripSummary};
use super::{Action, Caller, RampError};

pub const CSV_HEADER: [&str; 13] = [
    "trip_id",
    "scooter_id",
    "kind",
    "t_ms",
    "lat",
    "lon",
    "speed_mps",
    "heading_deg",
    "v0",
    "v1",
    "v2",
    "scalar",
    "unit",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    GeoJson,
    JsonLines,
}

impl FromStr for ExportFormat {
    type Err = RampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "geojson" => Ok(ExportFormat::GeoJson),
            "jsonl" => Ok(ExportFormat::JsonLines),
            other => Err(RampError::UnsupportedFormat(other.to_owned())),
        }
    }
}

impl ExportFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            ExportFormat::Csv => "text/csv",
            ExportFormat::GeoJson => "application/geo+json",
            ExportFormat::JsonLines => "application/x-ndjson",
        }
    }
}

fn csv_row(trip: &Trip, kind: &SensorKind, t_ms: i64, value: &SampleValue) -> [String; 13] {
    let mut row: [String; 13] = Default::default();
    row[0] = trip.trip_id.to_string();
    row[1] = trip.scooter_id.to_string();
    row[2] = kind.to_string();
    row[3] = t_ms.to_string();
    match value {
        SampleValue::Fix {
            position,
            speed_mps,
            heading_deg,
            ..
        } => {
            row[4] = format!("{:.9}", position.lat());
            row[5] = format!("{:.9}", position.lon());
            row[6] = speed_mps.to_string();
            row[7] = heading_deg.to_string();
        }
        SampleValue::Vector3 { x, y, z, unit } => {
            row[8] = x.to_string();
            row[9] = y.to_string();
            row[10] = z.to_string();
            row[12] = unit.clone();
        }
        SampleValue::Scalar { value, unit } => {
            row[11] = value.to_string();
            row[12] = unit.clone();
        }
        SampleValue::BlobRef { byte_len, .. } => {
            row[11] = byte_len.to_string();
            row[12] = "bytes".into();
        }
    }
    row
}

pub fn write_csv<'a>(trips: impl IntoIterator<Item = &'a Trip>) -> Result<Vec<u8>, RampError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| RampError::Invalid(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for trip in trips {
        for (kind, samples) in &trip.samples {
            for s in samples {
                w.write_record(csv_row(trip, kind, s.t.millis(), &s.value)).map_err(io)?;
            }
        }
    }
    w.into_inner().map_err(|e| RampError::Invalid(e.to_string()))
}

/// Position at `t`: the most recent fix at or before it, else the first fix.
fn fix_before(trip: &Trip, t: i64) -> Option<[f64; 2]> {
    let fixes = trip.samples.get(&SensorKind::Gps)?;
    let i = fixes.partition_point(|s| s.t.millis() <= t);
    let s = if i == 0 { fixes.first()? } else { &fixes[i - 1] };
    s.value.position().map(|p| [p.lon(), p.lat()])
}

pub fn geojson<'a>(trips: impl IntoIterator<Item = &'a Trip>, include_samples: bool) -> Value {
    let mut features = Vec::new();
    for trip in trips {
        let coords: Vec<[f64; 2]> = trip.gps_fixes().map(|p| [p.lon(), p.lat()]).collect();
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": coords},
            "properties": TripSummary::of(trip),
        }));
        if !include_samples {
            continue;
        }
        for (kind, samples) in &trip.samples {
            for s in samples {
                let SampleValue::Scalar { value, unit } = &s.value else {
                    continue;
                };
                let Some(at) = fix_before(trip, s.t.millis()) else {
                    continue;
                };
                features.push(json!({
                    "type": "Feature",
                    "geometry": {"type": "Point", "coordinates": at},
                    "properties": {
                        "trip_id": trip.trip_id,
                        "kind": kind,
                        "t": s.t,
                        "value": value,
                        "unit": unit,
                    },
                }));
            }
        }
    }
    json!({"type": "FeatureCollection", "features": features})
}

/// GeoJSON for specific trips.
pub fn trip_geojson(fc: &FleetController, caller: &Caller, ids: &[TripId], include_samples: bool) -> Result<Value, RampError> {
    caller.require(Action::QueryTrips)?;
    let mut trips = Vec::with_capacity(ids.len());
    for id in ids {
        let trip = fc.trip(id).ok_or_else(|| RampError::UnknownTrip(id.clone()))?;
        let project = trip.project_id.as_ref().and_then(|p| fc.project(p));
        if !caller.can_see_project(project) {
            return Err(RampError::Forbidden {
                role: caller.role,
                action: format!("read trip {id}"),
            });
        }
        trips.push(trip);
    }
    Ok(geojson(trips, include_samples))
}

pub fn write_jsonl<'a>(trips: impl IntoIterator<Item = &'a Trip>) -> Vec<u8> {
    let mut out = Vec::new();
    for trip in trips {
        out.extend_from_slice(trip.canonical_json().as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn export(fc: &FleetController, caller: &Caller, filter: &TripFilter, format: ExportFormat) -> Result<Vec<u8>, RampError> {
    let trips = matching_trips(fc, caller, filter)?;
    match format {
        ExportFormat::Csv => write_csv(trips),
        ExportFormat::GeoJson => Ok(serde_json::to_vec(&geojson(trips, false)).expect("json value serializes")),
        ExportFormat::JsonLines => Ok(write_jsonl(trips)),
    }
}

/// Loads trips from a JSON-lines export. All lines are parsed before any
/// trip is stored.
pub fn import_jsonl(fc: &mut FleetController, caller: &Caller, data: &[u8]) -> Result<usize, RampError> {
    caller.require(Action::ImportData)?;
    let text = std::str::from_utf8(data).map_err(|e| RampError::Invalid(e.to_string()))?;
    let trips = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str::<Trip>(l).map_err(|e| RampError::Invalid(format!("line {}: {e}", i + 1))))
        .collect::<Result<Vec<_>, _>>()?;
    let n = trips.len();
    for trip in trips {
        fc.import_trip(trip)?;
    }
    Ok(n)
}
