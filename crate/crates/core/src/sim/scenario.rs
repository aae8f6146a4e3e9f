//! Scenario files and the Wi-Fi availability model.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{destination, haversine_distance, point_in_fence, GeoFence};
use crate::model::{GeoPoint, ProjectId, ScooterId, SensorKind, Timestamp, MINUTE_MS};
use crate::policy::{validate_policy, PolicyDraft};
use crate::schedule::ScheduleSpec;

use super::mobility::{Leg, Route, ACCEL_MPS2, MAX_SPEED_MPS};
use super::synth::{Ambient, Noise};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScooterSpec {
    pub scooter_id: ScooterId,
    pub start: GeoPoint,
    #[serde(default = "full")]
    pub battery_pct: f64,
}

fn full() -> f64 {
    100.0
}

fn always_up() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum ZoneArea {
    Disc { center: GeoPoint, radius_m: f64 },
    Fence { fence: GeoFence },
}

impl ZoneArea {
    pub fn contains(&self, p: GeoPoint) -> bool {
        match self {
            ZoneArea::Disc { center, radius_m } => haversine_distance(*center, p) <= *radius_m,
            ZoneArea::Fence { fence } => point_in_fence(p, fence),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WifiZone {
    #[serde(flatten)]
    pub area: ZoneArea,
    /// Per-minute availability; falls back to the scenario-wide value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uptime: Option<f64>,
}

/// Injected failures. Rates are probabilities per simulated minute
/// (restarts) or per request (link faults).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Faults {
    #[serde(default)]
    pub restart_per_minute: f64,
    /// Request lost before reaching the controller.
    #[serde(default)]
    pub drop_request: f64,
    /// Request applied but the response lost.
    #[serde(default)]
    pub drop_ack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyChange {
    pub at_s: f64,
    pub policy: PolicyDraft,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project_id: Option<ProjectId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start: Timestamp,
    pub duration_s: f64,
    pub scooters: Vec<ScooterSpec>,
    #[serde(default)]
    pub routes: BTreeMap<ScooterId, Vec<Leg>>,
    #[serde(default)]
    pub wifi_zones: Vec<WifiZone>,
    #[serde(default = "always_up")]
    pub wifi_uptime: f64,
    #[serde(default)]
    pub noise: Noise,
    #[serde(default)]
    pub ambient: Ambient,
    pub policy: PolicyDraft,
    #[serde(default)]
    pub policy_changes: Vec<PolicyChange>,
    #[serde(default)]
    pub faults: Faults,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_capacity_bytes: Option<u64>,
}

/// 2025-03-03 14:00 UTC, a Monday morning in San Antonio.
pub const DEFAULT_START: Timestamp = Timestamp(1_741_010_400_000);

fn default_start() -> Timestamp {
    DEFAULT_START
}

/// Longest accepted run, one week.
pub const MAX_DURATION_S: f64 = 7.0 * 86_400.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("duration_s must be in (0, {MAX_DURATION_S}], got {0}")]
    Duration(f64),
    #[error("scenario has no scooters")]
    NoScooters,
    #[error("duplicate scooter id {0}")]
    DuplicateScooter(ScooterId),
    #[error("scooter {0}: battery_pct {1} outside [0, 100]")]
    Battery(ScooterId, f64),
    #[error("route for unknown scooter {0}")]
    UnknownRoute(ScooterId),
    #[error("scooter {0}: {1}")]
    Route(ScooterId, String),
    #[error("{field} = {value} is not a probability")]
    Probability { field: String, value: f64 },
    #[error("wifi zone {0}: radius must be positive")]
    ZoneRadius(usize),
    #[error("noise values must be finite and non-negative")]
    Noise,
    #[error("policy: {0}")]
    Policy(String),
    #[error("policy change {0}: at_s outside the run")]
    ChangeTime(usize),
    #[error("parse: {0}")]
    Parse(String),
}

fn probability(field: impl Into<String>, value: f64) -> Result<(), ScenarioError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ScenarioError::Probability { field: field.into(), value })
    }
}

fn policy_ok(draft: &PolicyDraft) -> Result<(), ScenarioError> {
    validate_policy(draft).map(|_| ()).map_err(|v| {
        ScenarioError::Policy(v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
    })
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn end(&self) -> Timestamp {
        self.start.plus_ms((self.duration_s * 1000.0).round() as i64)
    }

    /// Checks everything and plans each scooter's route.
    pub fn plan_routes(&self) -> Result<BTreeMap<ScooterId, Route>, ScenarioError> {
        if !(self.duration_s > 0.0 && self.duration_s <= MAX_DURATION_S) {
            return Err(ScenarioError::Duration(self.duration_s));
        }
        if self.scooters.is_empty() {
            return Err(ScenarioError::NoScooters);
        }
        let mut ids = BTreeSet::new();
        for s in &self.scooters {
            if !ids.insert(s.scooter_id.clone()) {
                return Err(ScenarioError::DuplicateScooter(s.scooter_id.clone()));
            }
            if !(0.0..=100.0).contains(&s.battery_pct) {
                return Err(ScenarioError::Battery(s.scooter_id.clone(), s.battery_pct));
            }
        }
        if let Some(id) = self.routes.keys().find(|id| !ids.contains(*id)) {
            return Err(ScenarioError::UnknownRoute(id.clone()));
        }
        probability("wifi_uptime", self.wifi_uptime)?;
        probability("faults.restart_per_minute", self.faults.restart_per_minute)?;
        probability("faults.drop_request", self.faults.drop_request)?;
        probability("faults.drop_ack", self.faults.drop_ack)?;
        for (i, z) in self.wifi_zones.iter().enumerate() {
            if let ZoneArea::Disc { radius_m, .. } = z.area {
                if !(radius_m > 0.0 && radius_m.is_finite()) {
                    return Err(ScenarioError::ZoneRadius(i));
                }
            }
            if let Some(u) = z.uptime {
                probability(format!("wifi_zones[{i}].uptime"), u)?;
            }
        }
        let n = self.noise;
        if !(n.gps_sigma_m >= 0.0 && n.imu_sigma >= 0.0 && n.gps_sigma_m.is_finite() && n.imu_sigma.is_finite()) {
            return Err(ScenarioError::Noise);
        }
        policy_ok(&self.policy)?;
        for (i, c) in self.policy_changes.iter().enumerate() {
            if !(c.at_s >= 0.0 && c.at_s <= self.duration_s) {
                return Err(ScenarioError::ChangeTime(i));
            }
            policy_ok(&c.policy)?;
        }
        let mut routes = BTreeMap::new();
        for s in &self.scooters {
            let legs = self.routes.get(&s.scooter_id).map_or(&[][..], Vec::as_slice);
            let route = Route::plan(self.start, s.start, legs)
                .map_err(|e| ScenarioError::Route(s.scooter_id.clone(), e.to_string()))?;
            routes.insert(s.scooter_id.clone(), route);
        }
        Ok(routes)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.plan_routes().map(|_| ())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Uniform draw in [0, 1) fixed by its inputs.
pub fn hashed_unit(seed: u64, stream: u64, index: i64) -> f64 {
    let h = splitmix(splitmix(seed ^ splitmix(stream)) ^ index as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

const ZONE_STREAM: u64 = 0x5A0E;

/// Whether zone `index` is up during the minute containing `t`.
pub fn zone_up(scenario: &Scenario, index: usize, t: Timestamp) -> bool {
    let uptime = scenario.wifi_zones[index].uptime.unwrap_or(scenario.wifi_uptime);
    let minute = t.millis().div_euclid(MINUTE_MS);
    hashed_unit(scenario.seed, ZONE_STREAM + index as u64, minute) < uptime
}

/// Online iff inside some zone that is up at `t`.
pub fn connectivity_at(position: GeoPoint, t: Timestamp, scenario: &Scenario) -> bool {
    scenario
        .wifi_zones
        .iter()
        .enumerate()
        .any(|(i, z)| z.area.contains(position) && zone_up(scenario, i, t))
}

/// Policy with no fence and no weekly windows.
pub fn open_policy(rates: &[(SensorKind, f64)]) -> PolicyDraft {
    PolicyDraft {
        sensors: rates.iter().cloned().collect(),
        fence: None,
        schedule: ScheduleSpec {
            active_from: NaiveDate::from_ymd_opt(2000, 1, 1).expect("date"),
            active_until: NaiveDate::from_ymd_opt(2099, 12, 31).expect("date"),
            windows: Vec::new(),
        },
    }
}

/// Campus center used by the demo.
pub const CAMPUS: (f64, f64) = (29.5830, -98.6190);

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub seed: u64,
    pub scooters: usize,
    pub duration_s: f64,
    pub wifi_uptime: f64,
    pub hub_radius_m: f64,
    pub faults: Faults,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            scooters: 8,
            duration_s: 2.0 * 3_600.0,
            wifi_uptime: 0.3,
            hub_radius_m: 60.0,
            faults: Faults {
                restart_per_minute: 0.02,
                drop_request: 0.05,
                drop_ack: 0.05,
            },
        }
    }
}

fn campus_point(bearing: f64, dist: f64) -> GeoPoint {
    destination(GeoPoint::new(CAMPUS.0, CAMPUS.1).expect("campus"), bearing, dist)
}

fn leg_duration(len: f64, v: f64) -> f64 {
    let v = v.min(MAX_SPEED_MPS);
    if len >= v * v / ACCEL_MPS2 {
        len / v + v / ACCEL_MPS2
    } else {
        2.0 * (len / ACCEL_MPS2).sqrt()
    }
}

/// Campus fleet: scooters shuttle between Wi-Fi hubs and random spots,
/// parking a few minutes between rides.
pub fn demo_scenario(opts: &DemoOptions) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let hubs = [
        campus_point(0.0, 0.0),
        campus_point(60.0, 700.0),
        campus_point(200.0, 650.0),
        campus_point(310.0, 800.0),
    ];
    let mut scooters = Vec::new();
    let mut routes = BTreeMap::new();
    for i in 0..opts.scooters {
        let id = ScooterId::new(format!("sc{:02}", i + 1));
        let start = hubs[i % hubs.len()];
        let mut legs = Vec::new();
        let mut at = start;
        let mut t = rng.random_range(0.0..120.0);
        while t < opts.duration_s - 300.0 {
            let to = if rng.random_bool(0.5) {
                hubs[rng.random_range(0..hubs.len())]
            } else {
                campus_point(rng.random_range(0.0..360.0), rng.random_range(100.0..1_100.0))
            };
            let len = haversine_distance(at, to);
            if len < 50.0 {
                t += 30.0;
                continue;
            }
            let cruise = if rng.random_bool(0.1) { 10.0 } else { rng.random_range(3.5..7.5) };
            let depart = (t * 10.0).round() / 10.0;
            legs.push(Leg { depart_s: depart, to, cruise_mps: cruise });
            let parked = if hubs.contains(&to) {
                rng.random_range(240.0..600.0)
            } else {
                rng.random_range(150.0..300.0)
            };
            t = depart + leg_duration(len, cruise) + 1.0 + parked;
            at = to;
        }
        scooters.push(ScooterSpec {
            scooter_id: id.clone(),
            start,
            battery_pct: rng.random_range(60.0..100.0_f64).round(),
        });
        routes.insert(id, legs);
    }
    Scenario {
        seed: opts.seed,
        start: DEFAULT_START,
        duration_s: opts.duration_s,
        scooters,
        routes,
        wifi_zones: hubs
            .iter()
            .map(|&center| WifiZone {
                area: ZoneArea::Disc { center, radius_m: opts.hub_radius_m },
                uptime: None,
            })
            .collect(),
        wifi_uptime: opts.wifi_uptime,
        noise: Noise { gps_sigma_m: 0.5, imu_sigma: 0.02 },
        ambient: Ambient::default(),
        policy: open_policy(&[
            (SensorKind::Gps, 1.0),
            (SensorKind::Accelerometer, 10.0),
            (SensorKind::Gyroscope, 10.0),
            (SensorKind::Temperature, 1.0),
        ]),
        policy_changes: Vec::new(),
        faults: opts.faults,
        storage_capacity_bytes: None,
    }
}
