//! Spatiotemporal trip filters, pagination and statistics.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::controller::FleetController;
use crate::geo::{point_in_fence, GeoFence};
use crate::model::{
    EnrichmentRecord, GeoPoint, LoanId, ProjectId, QualityFlag, ScooterId, SensorKind, Timestamp, Trip, TripId,
};

use super::{Action, Caller, RampError};

pub const DEFAULT_PAGE: usize = 100;
pub const MAX_PAGE: usize = 1_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    /// At least one fix inside the region.
    #[default]
    Intersects,
    /// Every fix inside, and at least one fix.
    Contained,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripFilter {
    pub project_id: Option<ProjectId>,
    pub scooter_ids: Option<BTreeSet<ScooterId>>,
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
    pub region: Option<GeoFence>,
    pub region_mode: RegionMode,
    pub min_distance_m: Option<f64>,
}

impl TripFilter {
    pub fn validate(&self) -> Result<(), RampError> {
        let any = self.project_id.is_some()
            || self.scooter_ids.is_some()
            || self.from.is_some()
            || self.to.is_some()
            || self.region.is_some()
            || self.min_distance_m.is_some();
        if !any {
            return Err(RampError::InvalidFilter("at least one criterion is required".into()));
        }
        if let (Some(from), Some(to)) = (self.from, self.to) {
            if from >= to {
                return Err(RampError::InvalidFilter(format!("from {} is not before to {}", from.millis(), to.millis())));
            }
        }
        if let Some(d) = self.min_distance_m {
            if !(d.is_finite() && d >= 0.0) {
                return Err(RampError::InvalidFilter("min_distance_m must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Whether `trip` satisfies every criterion that is set.
    pub fn matches(&self, trip: &Trip) -> bool {
        if self.project_id.as_ref().is_some_and(|p| trip.project_id.as_ref() != Some(p)) {
            return false;
        }
        if self.scooter_ids.as_ref().is_some_and(|ids| !ids.contains(&trip.scooter_id)) {
            return false;
        }
        if self.to.is_some_and(|to| trip.started_at >= to) {
            return false;
        }
        if self.from.is_some_and(|from| trip.ended_at < from) {
            return false;
        }
        if self.min_distance_m.is_some_and(|d| trip.distance_m < d) {
            return false;
        }
        if let Some(fence) = &self.region {
            let mut fixes = trip.gps_fixes().peekable();
            let hit = match self.region_mode {
                RegionMode::Intersects => fixes.any(|p| point_in_fence(p, fence)),
                RegionMode::Contained => fixes.peek().is_some() && fixes.all(|p| point_in_fence(p, fence)),
            };
            if !hit {
                return false;
            }
        }
        true
    }
}

/// Parses `lat,lon;lat,lon;...` into a fence.
pub fn parse_region(text: &str) -> Result<GeoFence, RampError> {
    let bad = |m: String| RampError::InvalidFilter(format!("region: {m}"));
    let mut ring = Vec::new();
    for pair in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (lat, lon) = pair.split_once(',').ok_or_else(|| bad(format!("{pair:?} is not lat,lon")))?;
        let lat: f64 = lat.trim().parse().map_err(|_| bad(format!("bad latitude {lat:?}")))?;
        let lon: f64 = lon.trim().parse().map_err(|_| bad(format!("bad longitude {lon:?}")))?;
        ring.push(GeoPoint::new(lat, lon).map_err(|e| bad(e.to_string()))?);
    }
    GeoFence::new(ring, Vec::new()).map_err(|e| bad(e.to_string()))
}

pub fn format_region(fence: &GeoFence) -> String {
    fence
        .exterior()
        .iter()
        .map(|p| format!("{},{}", p.lat(), p.lon()))
        .collect::<Vec<_>>()
        .join(";")
}

/// Query string form of a filter plus paging and output options.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TripQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project_id: Option<String>,
    /// Comma-separated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scooter_ids: Option<String>,
    /// Epoch milliseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_mode: Option<RegionMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_distance_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cursor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_empty: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_samples: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    /// Comma-separated trip ids, for the GeoJSON endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<String>,
}

pub fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

impl TripQuery {
    pub fn filter(&self) -> Result<TripFilter, RampError> {
        let filter = TripFilter {
            project_id: self.project_id.as_deref().map(ProjectId::new),
            scooter_ids: self.scooter_ids.as_deref().map(|s| split_list(s).map(ScooterId::new).collect()),
            from: self.from.map(Timestamp),
            to: self.to.map(Timestamp),
            region: self.region.as_deref().map(parse_region).transpose()?,
            region_mode: self.region_mode.unwrap_or_default(),
            min_distance_m: self.min_distance_m,
        };
        filter.validate()?;
        Ok(filter)
    }

    pub fn from_filter(filter: &TripFilter) -> Self {
        TripQuery {
            project_id: filter.project_id.as_ref().map(|p| p.to_string()),
            scooter_ids: filter
                .scooter_ids
                .as_ref()
                .map(|ids| ids.iter().map(ScooterId::as_str).collect::<Vec<_>>().join(",")),
            from: filter.from.map(Timestamp::millis),
            to: filter.to.map(Timestamp::millis),
            region: filter.region.as_ref().map(format_region),
            region_mode: filter.region.as_ref().map(|_| filter.region_mode),
            min_distance_m: filter.min_distance_m,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripSummary {
    pub trip_id: TripId,
    pub scooter_id: ScooterId,
    pub project_id: Option<ProjectId>,
    pub loan_id: Option<LoanId>,
    pub started_at: Timestamp,
    pub ended_at: Timestamp,
    pub distance_m: f64,
    pub duration_s: f64,
    pub sample_counts: BTreeMap<SensorKind, usize>,
    pub quality_flags: BTreeSet<QualityFlag>,
    pub enrichment: Vec<EnrichmentRecord>,
}

impl TripSummary {
    pub fn of(trip: &Trip) -> Self {
        Self {
            trip_id: trip.trip_id.clone(),
            scooter_id: trip.scooter_id.clone(),
            project_id: trip.project_id.clone(),
            loan_id: trip.loan_id.clone(),
            started_at: trip.started_at,
            ended_at: trip.ended_at,
            distance_m: trip.distance_m,
            duration_s: trip.duration_s(),
            sample_counts: trip.sample_counts(),
            quality_flags: trip.quality_flags.clone(),
            enrichment: trip.enrichment.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TripPage {
    pub trips: Vec<TripSummary>,
    pub next_cursor: Option<String>,
}

fn cursor_of(trip: &Trip) -> String {
    format!("{}:{}", trip.started_at.millis(), trip.trip_id)
}

fn parse_cursor(c: &str) -> Result<(Timestamp, TripId), RampError> {
    let (ms, id) = c
        .split_once(':')
        .ok_or_else(|| RampError::InvalidFilter(format!("bad cursor {c:?}")))?;
    let ms: i64 = ms.parse().map_err(|_| RampError::InvalidFilter(format!("bad cursor {c:?}")))?;
    Ok((Timestamp(ms), TripId::new(id)))
}

/// Every trip visible to `caller` that matches, ordered by (started_at, trip_id).
pub fn matching_trips<'a>(fc: &'a FleetController, caller: &Caller, filter: &TripFilter) -> Result<Vec<&'a Trip>, RampError> {
    caller.require(Action::QueryTrips)?;
    filter.validate()?;
    if let Some(pid) = &filter.project_id {
        let project = fc.project(pid).ok_or_else(|| RampError::UnknownProject(pid.clone()))?;
        if !caller.can_see_project(Some(project)) {
            return Err(RampError::Forbidden {
                role: caller.role,
                action: format!("read project {pid}"),
            });
        }
    }
    let mut trips: Vec<&Trip> = fc
        .trips()
        .filter(|t| caller.can_see_project(t.project_id.as_ref().and_then(|p| fc.project(p))))
        .filter(|t| filter.matches(t))
        .collect();
    trips.sort_by(|a, b| (a.started_at, &a.trip_id).cmp(&(b.started_at, &b.trip_id)));
    Ok(trips)
}

pub fn query_trips(
    fc: &FleetController,
    caller: &Caller,
    filter: &TripFilter,
    cursor: Option<&str>,
    limit: Option<usize>,
) -> Result<TripPage, RampError> {
    let limit = limit.unwrap_or(DEFAULT_PAGE);
    if limit == 0 || limit > MAX_PAGE {
        return Err(RampError::InvalidFilter(format!("limit must be in 1..={MAX_PAGE}")));
    }
    let after = cursor.map(parse_cursor).transpose()?;
    let all = matching_trips(fc, caller, filter)?;
    let start = match &after {
        Some((t, id)) => all.partition_point(|trip| (trip.started_at, &trip.trip_id) <= (*t, id)),
        None => 0,
    };
    let page: Vec<&Trip> = all[start..].iter().take(limit).copied().collect();
    let next_cursor = if start + page.len() < all.len() {
        page.last().map(|t| cursor_of(t))
    } else {
        None
    };
    Ok(TripPage {
        trips: page.into_iter().map(TripSummary::of).collect(),
        next_cursor,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub trip_count: u64,
    pub distance_m: f64,
    pub duration_s: f64,
}

impl Bucket {
    fn add(&mut self, trip: &Trip) {
        self.trip_count += 1;
        self.distance_m += trip.distance_m;
        self.duration_s += trip.duration_s();
    }

    fn absorb(&mut self, other: &Bucket) {
        self.trip_count += other.trip_count;
        self.distance_m += other.distance_m;
        self.duration_s += other.duration_s;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub trip_count: u64,
    pub total_distance_m: f64,
    pub total_duration_s: f64,
    pub mean_speed_mps: f64,
    /// Keyed by the UTC date each trip started.
    pub per_day: BTreeMap<NaiveDate, Bucket>,
    pub per_scooter: BTreeMap<ScooterId, Bucket>,
}

impl StatsReport {
    /// Totals are the sum of the day buckets in date order, so they agree
    /// with the buckets exactly.
    pub fn from_trips<'a>(trips: impl IntoIterator<Item = &'a Trip>) -> Self {
        let mut per_day: BTreeMap<NaiveDate, Bucket> = BTreeMap::new();
        let mut per_scooter: BTreeMap<ScooterId, Bucket> = BTreeMap::new();
        for t in trips {
            per_day.entry(t.started_at.utc_date()).or_default().add(t);
            per_scooter.entry(t.scooter_id.clone()).or_default().add(t);
        }
        let mut total = Bucket::default();
        for b in per_day.values() {
            total.absorb(b);
        }
        Self {
            trip_count: total.trip_count,
            total_distance_m: total.distance_m,
            total_duration_s: total.duration_s,
            mean_speed_mps: if total.duration_s > 0.0 {
                total.distance_m / total.duration_s
            } else {
                0.0
            },
            per_day,
            per_scooter,
        }
    }
}

/// Aggregates over the full query result. Empty trips are left out unless
/// asked for.
pub fn stats(fc: &FleetController, caller: &Caller, filter: &TripFilter, include_empty: bool) -> Result<StatsReport, RampError> {
    let trips = matching_trips(fc, caller, filter)?;
    Ok(StatsReport::from_trips(
        trips.into_iter().filter(|t| include_empty || !t.is_empty_trip()),
    ))
}
