//! Acceptance checks, shared by `labctl verify` and the `acceptance` test
//! target. Every check brings its own brute-force oracle rather than
//! trusting the code under test.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{self, Write};
use std::time::{Duration, Instant};

use chrono::{Datelike, NaiveDate, NaiveTime, TimeZone, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use scooterlab::controller::enrich::providers_from_name;
use scooterlab::controller::{Acknowledgments, FcError, FleetController};
use scooterlab::geo::{destination, point_in_fence, GeoFence};
use scooterlab::model::{
    ChunkKey, GeoPoint, LoanId, Role, SampleValue, Scooter, ScooterId, SensorKind, SensorSample, Timestamp,
    TripChunk, TripId, UserId, DAY_MS, LOAN_PERIOD_MS,
};
use scooterlab::policy::PolicyDraft;
use scooterlab::protocol::Census;
use scooterlab::ramp::{self, Caller, ExportFormat, RegionMode, TripFilter};
use scooterlab::schedule::{ScheduleSpec, ScheduleWindowSpec};
use scooterlab::sim::scenario::{open_policy, PolicyChange, CAMPUS};
use scooterlab::sim::{
    self, demo_scenario, DemoOptions, Faults, Leg, LogEvent, Noise, PosePayload, RunOptions, Scenario,
    SimReport, WifiZone, ZoneArea, MAX_SPEED_MPS,
};

/// Vehicle top speed, 18 mph.
pub const SPEED_CAP_MPS: f64 = 8.05;
/// Distance on one full charge, 40 mi.
pub const FULL_RANGE_M: f64 = 64_374.0;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(name: &'static str, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            pass,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{verdict}  {:<22} {}", self.name, self.detail)
    }
}

// ---- log plumbing ----

/// Writer that hands each complete line to a callback.
struct LineSink<F: FnMut(&[u8])> {
    partial: Vec<u8>,
    on_line: F,
}

impl<F: FnMut(&[u8])> LineSink<F> {
    fn new(on_line: F) -> Self {
        Self {
            partial: Vec::new(),
            on_line,
        }
    }
}

impl<F: FnMut(&[u8])> Write for LineSink<F> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let mut rest = buf;
        while let Some(i) = rest.iter().position(|&b| b == b'\n') {
            if self.partial.is_empty() {
                (self.on_line)(&rest[..i]);
            } else {
                self.partial.extend_from_slice(&rest[..i]);
                (self.on_line)(&self.partial);
                self.partial.clear();
            }
            rest = &rest[i + 1..];
        }
        self.partial.extend_from_slice(rest);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn event_type(line: &[u8]) -> &str {
    const KEY: &str = "\"event_type\":\"";
    let text = std::str::from_utf8(line).unwrap_or("");
    match text.find(KEY) {
        Some(i) => {
            let rest = &text[i + KEY.len()..];
            &rest[..rest.find('"').unwrap_or(0)]
        }
        None => "",
    }
}

fn parse<P: for<'de> Deserialize<'de>>(line: &[u8]) -> Option<LogEvent<P>> {
    serde_json::from_slice(line).ok()
}

fn admin() -> Caller {
    Caller {
        user_id: UserId::new("acceptance"),
        role: Role::Admin,
    }
}

fn controller() -> FleetController {
    FleetController::in_memory("acceptance", providers_from_name("stub", 11).expect("stub providers"))
}

fn campus() -> GeoPoint {
    GeoPoint::new(CAMPUS.0, CAMPUS.1).expect("campus is a valid point")
}

// ---- the shared fleet run ----

/// Eight-scooter demo: hub Wi-Fi at 30 % uptime, agent restarts and lossy links.
pub fn fleet_scenario() -> Scenario {
    demo_scenario(&DemoOptions::default())
}

pub struct FleetRun {
    pub scenario: Scenario,
    pub fc: FleetController,
    pub report: SimReport,
    pub wall: Duration,
    pub pose_max_speed_mps: f64,
    pub poses: u64,
}

pub fn run_fleet(scenario: &Scenario) -> Result<FleetRun, String> {
    let mut fc = controller();
    let mut max = 0.0_f64;
    let mut poses = 0;
    let started = Instant::now();
    let report = {
        let mut sink = LineSink::new(|line: &[u8]| {
            if event_type(line) == "pose" {
                if let Some(e) = parse::<PosePayload>(line) {
                    max = max.max(e.payload.speed_mps);
                    poses += 1;
                }
            }
        });
        sim::run(scenario, &mut fc, &RunOptions::default(), Some(&mut sink)).map_err(|e| e.to_string())?
    };
    Ok(FleetRun {
        scenario: scenario.clone(),
        fc,
        report,
        wall: started.elapsed(),
        pose_max_speed_mps: max,
        poses,
    })
}

const M_PER_DEG: f64 = 111_195.0;

/// Share of the routes' bounding box covered by Wi-Fi zones.
pub fn wifi_coverage(s: &Scenario) -> f64 {
    let pts: Vec<GeoPoint> = s
        .scooters
        .iter()
        .map(|sc| sc.start)
        .chain(s.routes.values().flatten().map(|l| l.to))
        .collect();
    let (mut lat0, mut lat1, mut lon0, mut lon1) = (90.0_f64, -90.0_f64, 180.0_f64, -180.0_f64);
    for p in &pts {
        lat0 = lat0.min(p.lat());
        lat1 = lat1.max(p.lat());
        lon0 = lon0.min(p.lon());
        lon1 = lon1.max(p.lon());
    }
    let coslat = ((lat0 + lat1) / 2.0).to_radians().cos();
    let area = (lat1 - lat0) * M_PER_DEG * (lon1 - lon0) * M_PER_DEG * coslat;
    let zones: f64 = s
        .wifi_zones
        .iter()
        .map(|z| match &z.area {
            ZoneArea::Disc { radius_m, .. } => std::f64::consts::PI * radius_m * radius_m,
            ZoneArea::Fence { fence } => fence.area_deg2() * M_PER_DEG * M_PER_DEG * coslat,
        })
        .sum();
    if area > 0.0 {
        zones / area
    } else {
        f64::INFINITY
    }
}

fn minus(a: Census, b: Census) -> Census {
    Census {
        samples: a.samples.wrapping_sub(b.samples),
        fingerprint: a.fingerprint.wrapping_sub(b.fingerprint),
    }
}

// ---- criteria ----

pub fn exactly_once(run: &FleetRun) -> Outcome {
    let r = &run.report;
    let expected = minus(r.ledger.generated, r.ledger.suppressed);
    let restarts: u32 = r.scooters.iter().map(|s| s.restarts).sum();
    let coverage = wifi_coverage(&run.scenario);
    let wall = run.wall.as_secs_f64();
    let speedup = r.simulated_s / wall;
    let lost = expected.samples.saturating_sub(r.ingested.samples);
    let duplicated = r.ingested.samples.saturating_sub(expected.samples);
    let pass = r.ingested == expected
        && r.drained
        && !r.degraded
        && run.scenario.scooters.len() == 8
        && r.trips.len() >= 100
        && coverage <= 0.20
        && run.scenario.wifi_uptime <= 0.30
        && restarts > 0
        && wall < 120.0
        && speedup >= 50.0;
    Outcome::new(
        "exactly-once",
        pass,
        format!(
            "{} scooters, {} trips, {} restarts, wifi {:.1}% of area at {:.0}% uptime; generated {} - suppressed {} = ingested {} (lost {lost}, duplicated {duplicated}, fingerprint {}); {:.1} s wall, {:.0}x real time",
            run.scenario.scooters.len(),
            r.trips.len(),
            restarts,
            coverage * 100.0,
            run.scenario.wifi_uptime * 100.0,
            r.ledger.generated.samples,
            r.ledger.suppressed.samples,
            r.ingested.samples,
            if r.ingested.fingerprint == expected.fingerprint { "equal" } else { "DIFFERS" },
            wall,
            speedup,
        ),
    )
}

/// One scooter shuttling 2 km legs at full throttle until the battery dies.
pub fn range_scenario() -> Scenario {
    let a = campus();
    let b = destination(a, 90.0, 2_000.0);
    let legs: Vec<Leg> = (0..36)
        .map(|i| Leg {
            depart_s: 10.0 + 260.0 * i as f64,
            to: if i % 2 == 0 { b } else { a },
            cruise_mps: 12.0,
        })
        .collect();
    let id = ScooterId::new("range");
    Scenario {
        seed: 3,
        start: sim::scenario::DEFAULT_START,
        duration_s: 10.0 + 260.0 * 36.0 + 60.0,
        scooters: vec![sim::scenario::ScooterSpec {
            scooter_id: id.clone(),
            start: a,
            battery_pct: 100.0,
        }],
        routes: [(id, legs)].into(),
        wifi_zones: Vec::new(),
        wifi_uptime: 1.0,
        noise: Noise::default(),
        ambient: Default::default(),
        policy: open_policy(&[(SensorKind::Gps, 1.0)]),
        policy_changes: Vec::new(),
        faults: Faults::default(),
        storage_capacity_bytes: None,
    }
}

pub fn speed_and_range(run: &FleetRun) -> Outcome {
    let scenario = range_scenario();
    let mut fc = controller();
    let mut depleted: Option<(u64, f64)> = None;
    let mut max = 0.0_f64;
    let mut moving_after = 0u64;
    let result = {
        let mut sink = LineSink::new(|line: &[u8]| match event_type(line) {
            "battery_depleted" => {
                if let Some(e) = parse::<serde_json::Value>(line) {
                    depleted = Some((e.step, e.payload["odometer_m"].as_f64().unwrap_or(f64::NAN)));
                }
            }
            "pose" => {
                if let Some(e) = parse::<PosePayload>(line) {
                    max = max.max(e.payload.speed_mps);
                    if depleted.is_some_and(|(step, _)| e.step > step) && e.payload.speed_mps > 0.0 {
                        moving_after += 1;
                    }
                }
            }
            _ => {}
        });
        sim::run(&scenario, &mut fc, &RunOptions::default(), Some(&mut sink))
    };
    let report = match result {
        Ok(r) => r,
        Err(e) => return Outcome::new("speed-and-range", false, format!("range run failed: {e}")),
    };
    let overall = max.max(run.pose_max_speed_mps).max(run.report.max_speed_mps).max(report.max_speed_mps);
    let Some((_, odometer)) = depleted else {
        return Outcome::new("speed-and-range", false, "battery never reached 0%");
    };
    let err = (odometer - FULL_RANGE_M).abs() / FULL_RANGE_M;
    let pass = overall <= SPEED_CAP_MPS && MAX_SPEED_MPS <= SPEED_CAP_MPS && err <= 0.005 && moving_after == 0;
    Outcome::new(
        "speed-and-range",
        pass,
        format!(
            "max speed {overall:.3} m/s (cap {SPEED_CAP_MPS}) over {} poses; 0% battery at {odometer:.1} m (target {FULL_RANGE_M} m, error {:.3}%); {moving_after} moving poses after depletion",
            run.poses,
            err * 100.0
        ),
    )
}

/// Crossing-number test; points on an edge count as inside.
pub fn ray_cast(p: GeoPoint, fence: &GeoFence) -> bool {
    let (x, y) = (p.lon(), p.lat());
    let mut crossings = 0;
    for ring in fence.rings() {
        for i in 0..ring.len() {
            let a = ring[i];
            let b = ring[(i + 1) % ring.len()];
            let (ax, ay, bx, by) = (a.lon(), a.lat(), b.lon(), b.lat());
            let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            if cross == 0.0 && x >= ax.min(bx) && x <= ax.max(bx) && y >= ay.min(by) && y <= ay.max(by) {
                return true;
            }
            if (ay > y) != (by > y) {
                let xi = ax + (y - ay) * (bx - ax) / (by - ay);
                if x < xi {
                    crossings += 1;
                }
            }
        }
    }
    crossings % 2 == 1
}

/// Star-shaped, hence simple, polygon around `center`.
pub fn random_polygon(rng: &mut ChaCha8Rng, center: GeoPoint, radius_m: f64) -> GeoFence {
    loop {
        let n = rng.random_range(3..=16);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..360.0)).collect();
        angles.sort_by(f64::total_cmp);
        angles.dedup_by(|a, b| (*a - *b).abs() < 1.0);
        if angles.len() < 3 {
            continue;
        }
        let ring = angles
            .iter()
            .map(|&a| destination(center, a, radius_m * rng.random_range(0.2..1.0)))
            .collect();
        if let Ok(f) = GeoFence::new(ring, Vec::new()) {
            return f;
        }
    }
}

fn random_point_near(rng: &mut ChaCha8Rng, fence: &GeoFence) -> GeoPoint {
    let ring = fence.exterior();
    let lat = |f: fn(f64, f64) -> f64| ring.iter().map(|p| p.lat()).fold(ring[0].lat(), f);
    let lon = |f: fn(f64, f64) -> f64| ring.iter().map(|p| p.lon()).fold(ring[0].lon(), f);
    let (la0, la1, lo0, lo1) = (lat(f64::min), lat(f64::max), lon(f64::min), lon(f64::max));
    let (dla, dlo) = ((la1 - la0) * 0.2, (lo1 - lo0) * 0.2);
    GeoPoint::new(rng.random_range(la0 - dla..=la1 + dla), rng.random_range(lo0 - dlo..=lo1 + dlo)).expect("near campus")
}

pub fn geofence(run: &FleetRun) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut point_mismatches = 0;
    let mut inside = 0;
    for _ in 0..50 {
        let center = destination(campus(), rng.random_range(0.0..360.0), rng.random_range(0.0..2_000.0));
        let radius = rng.random_range(50.0..1_500.0);
        let fence = random_polygon(&mut rng, center, radius);
        for _ in 0..1_000 {
            let p = random_point_near(&mut rng, &fence);
            let expect = ray_cast(p, &fence);
            inside += expect as u32;
            if point_in_fence(p, &fence) != expect {
                point_mismatches += 1;
            }
        }
    }

    let fc = &run.fc;
    let trips: Vec<_> = fc.trips().collect();
    let scooters: Vec<ScooterId> = run.scenario.scooters.iter().map(|s| s.scooter_id.clone()).collect();
    let (t0, t1) = (run.scenario.start.millis(), run.scenario.end().millis());
    let mut query_mismatches = 0;
    let mut nonempty = 0;
    let filters = 24;
    for i in 0..filters {
        let anchor = trips[rng.random_range(0..trips.len())];
        let fixes: Vec<GeoPoint> = anchor.gps_fixes().collect();
        let center = fixes.get(rng.random_range(0..fixes.len().max(1))).copied().unwrap_or_else(campus);
        let radius = rng.random_range(100.0..900.0);
        let mut filter = TripFilter {
            region: Some(random_polygon(&mut rng, center, radius)),
            region_mode: if i % 3 == 2 { RegionMode::Contained } else { RegionMode::Intersects },
            ..TripFilter::default()
        };
        if rng.random_bool(0.35) {
            let a = rng.random_range(t0..t1);
            let b = rng.random_range(a + 1..=t1);
            filter.from = Some(Timestamp(a));
            filter.to = Some(Timestamp(b));
        }
        if rng.random_bool(0.25) {
            filter.scooter_ids = Some(scooters.iter().filter(|_| rng.random_bool(0.5)).cloned().collect());
        }
        if rng.random_bool(0.2) {
            filter.min_distance_m = Some(rng.random_range(0.0..1_500.0));
        }
        let fence = filter.region.clone().expect("set above");
        let brute: BTreeSet<TripId> = trips
            .iter()
            .filter(|t| {
                let fixes: Vec<GeoPoint> = t.gps_fixes().collect();
                let spatial = match filter.region_mode {
                    RegionMode::Intersects => fixes.iter().any(|&p| ray_cast(p, &fence)),
                    RegionMode::Contained => !fixes.is_empty() && fixes.iter().all(|&p| ray_cast(p, &fence)),
                };
                spatial
                    && filter.from.is_none_or(|f| t.ended_at >= f)
                    && filter.to.is_none_or(|to| t.started_at < to)
                    && filter.scooter_ids.as_ref().is_none_or(|s| s.contains(&t.scooter_id))
                    && filter.min_distance_m.is_none_or(|d| t.distance_m >= d)
            })
            .map(|t| t.trip_id.clone())
            .collect();
        let mut got = BTreeSet::new();
        let mut cursor: Option<String> = None;
        loop {
            match ramp::query_trips(fc, &admin(), &filter, cursor.as_deref(), Some(7)) {
                Ok(page) => {
                    got.extend(page.trips.into_iter().map(|s| s.trip_id));
                    match page.next_cursor {
                        Some(c) => cursor = Some(c),
                        None => break,
                    }
                }
                Err(e) => return Outcome::new("geofence-oracle", false, format!("query failed: {e}")),
            }
        }
        if got != brute {
            query_mismatches += 1;
        }
        nonempty += !brute.is_empty() as u32;
    }
    let pass = point_mismatches == 0 && query_mismatches == 0 && nonempty >= filters / 2;
    Outcome::new(
        "geofence-oracle",
        pass,
        format!(
            "50 polygons x 1000 points: {point_mismatches} disagreements with ray casting ({inside} inside); {filters} region filters over {} trips: {query_mismatches} differ from full scan, {nonempty} non-empty",
            trips.len()
        ),
    )
}

/// Fleet-wide Wi-Fi up half the time, Camera and 1 Hz GPS, then a mid-run switch to 5 Hz GPS
/// without Camera.
pub fn config_scenario() -> Scenario {
    let mut s = demo_scenario(&DemoOptions {
        seed: 21,
        duration_s: 3_600.0,
        faults: Faults::default(),
        ..DemoOptions::default()
    });
    s.noise = Noise {
        gps_sigma_m: 0.0,
        imu_sigma: 0.02,
    };
    s.wifi_zones = vec![WifiZone {
        area: ZoneArea::Disc {
            center: campus(),
            radius_m: 20_000.0,
        },
        uptime: Some(0.5),
    }];
    s.policy = open_policy(&[
        (SensorKind::Gps, 1.0),
        (SensorKind::Camera, 0.5),
        (SensorKind::Accelerometer, 10.0),
    ]);
    // the second change lands while the fleet is offline
    let after = open_policy(&[(SensorKind::Gps, 5.0), (SensorKind::Accelerometer, 10.0)]);
    s.policy_changes = [1_232.0, 1_517.0]
        .into_iter()
        .map(|at_s| PolicyChange {
            at_s,
            policy: after.clone(),
            project_id: None,
        })
        .collect();
    s
}

#[derive(Deserialize)]
struct VersionPayload {
    version: Option<u64>,
}

#[derive(Deserialize)]
struct TripStartPayload {
    trip_id: TripId,
    config_version: u64,
}

pub fn config_propagation() -> Outcome {
    let scenario = config_scenario();
    let mut fc = controller();
    let mut issued: BTreeMap<ScooterId, Vec<(u64, u64)>> = BTreeMap::new();
    let mut received: BTreeMap<ScooterId, Vec<(u64, u64)>> = BTreeMap::new();
    let mut links: BTreeMap<ScooterId, Vec<(u64, bool)>> = BTreeMap::new();
    let mut trip_version: HashMap<TripId, u64> = HashMap::new();
    let result = {
        let mut sink = LineSink::new(|line: &[u8]| {
            let kind = event_type(line);
            match kind {
                "config_issued" | "config_applied" | "config_deferred" => {
                    let Some(e) = parse::<VersionPayload>(line) else { return };
                    let (Some(id), Some(v)) = (e.scooter_id, e.payload.version) else { return };
                    if kind == "config_issued" {
                        issued.entry(id).or_default().push((e.step, v));
                    } else {
                        received.entry(id).or_default().push((e.step, v));
                    }
                }
                "link_up" | "link_down" => {
                    if let Some(e) = parse::<serde_json::Value>(line) {
                        if let Some(id) = e.scooter_id {
                            links.entry(id).or_default().push((e.step, kind == "link_up"));
                        }
                    }
                }
                "trip_started" => {
                    if let Some(e) = parse::<TripStartPayload>(line) {
                        trip_version.insert(e.payload.trip_id, e.payload.config_version);
                    }
                }
                _ => {}
            }
        });
        sim::run(&scenario, &mut fc, &RunOptions::default(), Some(&mut sink))
    };
    let report = match result {
        Ok(r) => r,
        Err(e) => return Outcome::new("config-propagation", false, format!("run failed: {e}")),
    };

    // each issued version (or a newer one) must reach the scooter before the
    // connectivity window open at issue time, or the next one, closes
    let mut late = Vec::new();
    let mut worst_s = 0.0_f64;
    let (mut online_issues, mut offline_issues) = (0, 0);
    for s in &scenario.scooters {
        let id = &s.scooter_id;
        let issues = issued.get(id).map_or(&[][..], Vec::as_slice);
        if issues.is_empty() {
            late.push(format!("{id}: never issued"));
        }
        let seen = links.get(id).map_or(&[][..], Vec::as_slice);
        for &(at, version) in issues {
            let got = received
                .get(id)
                .and_then(|r| r.iter().find(|&&(step, v)| step >= at && v >= version))
                .map(|(step, _)| *step);
            let online_at_issue = seen.iter().rev().find(|(step, _)| *step <= at).is_some_and(|(_, up)| *up);
            if online_at_issue {
                online_issues += 1;
            } else {
                offline_issues += 1;
            }
            let mut open = online_at_issue;
            let mut window_end = None;
            for &(step, up) in seen.iter().filter(|(step, _)| *step > at) {
                if up {
                    open = true;
                } else if open {
                    window_end = Some(step);
                    break;
                }
            }
            match got {
                Some(step) if window_end.is_none_or(|end| step <= end) => {
                    if online_at_issue {
                        worst_s = worst_s.max((step - at) as f64 * sim::STEP_MS as f64 / 1_000.0);
                    }
                }
                _ => late.push(format!("{id}: v{version} issued at step {at}, received {got:?}, window closed {window_end:?}")),
            }
        }
    }

    // first version carrying the switched policy
    let new_version = issued.values().filter_map(|v| v.first()).map(|&(_, v)| v).max().unwrap_or(0);
    let mut after = 0;
    let mut camera_after = 0;
    let mut gps_off = Vec::new();
    let mut camera_before = 0;
    for key in &report.trips {
        let Some(trip) = fc.trip(&key.1) else { continue };
        let v = trip_version.get(&trip.trip_id).copied().unwrap_or(0);
        let counts = trip.sample_counts();
        let camera = counts.get(&SensorKind::Camera).copied().unwrap_or(0);
        if v < new_version {
            camera_before += camera;
            continue;
        }
        after += 1;
        camera_after += camera;
        let gps = counts.get(&SensorKind::Gps).copied().unwrap_or(0) as f64;
        let expected = 5.0 * trip.ended_at.seconds_since(trip.started_at);
        if (gps - expected).abs() > 1.0 {
            gps_off.push(format!("{} {gps} vs {expected:.1}", trip.trip_id));
        }
    }
    let monotone = scenario
        .scooters
        .iter()
        .all(|s| fc.config_history(&s.scooter_id).windows(2).all(|w| w[0].version < w[1].version))
        && received.values().all(|r| r.windows(2).all(|w| w[0].1 <= w[1].1));
    let pass = late.is_empty() && online_issues > 0 && offline_issues > 0 && after > 0 && camera_after == 0 && camera_before > 0 && gps_off.is_empty() && monotone && report.exactly_once();
    let mut detail = format!(
        "{} of {} issues delivered within the connectivity window ({online_issues} while online, slowest {worst_s:.1} s; {offline_issues} while offline); {after} trips after switch: {camera_after} camera samples, {} with gps outside 5 Hz x duration +-1; versions increasing: {monotone}",
        online_issues + offline_issues - late.len(),
        online_issues + offline_issues,
        gps_off.len()
    );
    if !late.is_empty() {
        detail.push_str(&format!("; late: {}", late.join(", ")));
    }
    if !gps_off.is_empty() {
        detail.push_str(&format!("; off: {}", gps_off.iter().take(5).cloned().collect::<Vec<_>>().join(", ")));
    }
    Outcome::new("config-propagation", pass, detail)
}

pub const GATING_TZ: &str = "America/Chicago";

/// Windows on the run's Monday morning, local time.
fn gating_windows() -> Vec<(Weekday, NaiveTime, NaiveTime)> {
    let t = |h, m| NaiveTime::from_hms_opt(h, m, 0).expect("valid time");
    vec![(Weekday::Mon, t(8, 10), t(8, 40)), (Weekday::Mon, t(8, 50), t(9, 25))]
}

/// Northern half of the demo area, with a schedule that opens and closes
/// twice during the run.
pub fn gating_scenario() -> Scenario {
    let mut s = demo_scenario(&DemoOptions {
        seed: 33,
        scooters: 6,
        duration_s: 5_400.0,
        ..DemoOptions::default()
    });
    let c = campus();
    let sw = GeoPoint::new(c.lat() - 0.001, c.lon() - 0.03).expect("in range");
    let ne = GeoPoint::new(c.lat() + 0.03, c.lon() + 0.03).expect("in range");
    let fence = GeoFence::rectangle(sw, ne).expect("rectangle");
    let d = |m, day| NaiveDate::from_ymd_opt(2025, m, day).expect("valid date");
    s.policy = PolicyDraft {
        sensors: [
            (SensorKind::Gps, 1.0),
            (SensorKind::Accelerometer, 10.0),
            (SensorKind::Temperature, 1.0),
        ]
        .into(),
        fence: Some(fence.into()),
        schedule: ScheduleSpec {
            active_from: d(3, 1),
            active_until: d(3, 31),
            windows: gating_windows()
                .into_iter()
                .map(|(day, start, end)| ScheduleWindowSpec {
                    days: vec![day],
                    start,
                    end,
                    tz: GATING_TZ.into(),
                })
                .collect(),
        },
    };
    s
}

fn schedule_oracle(t: Timestamp) -> bool {
    let tz: chrono_tz::Tz = GATING_TZ.parse().expect("known zone");
    let utc = chrono::Utc.timestamp_millis_opt(t.millis()).single().expect("in range");
    let date = utc.date_naive();
    let first = NaiveDate::from_ymd_opt(2025, 3, 1).expect("date");
    let last = NaiveDate::from_ymd_opt(2025, 3, 31).expect("date");
    if date < first || date > last {
        return false;
    }
    let local = utc.with_timezone(&tz);
    gating_windows()
        .iter()
        .any(|&(day, start, end)| local.weekday() == day && local.time() >= start && local.time() < end)
}

#[derive(Deserialize)]
struct SampleLine {
    trip_id: TripId,
    kind: SensorKind,
    t: Timestamp,
    disposition: String,
    value: SampleValue,
}

pub fn policy_gating() -> Outcome {
    let scenario = gating_scenario();
    let fence: GeoFence = scenario
        .policy
        .fence
        .clone()
        .expect("gated")
        .try_into()
        .expect("valid fence");
    let mut fc = controller();
    let mut last_fix: HashMap<ScooterId, GeoPoint> = HashMap::new();
    let mut allowed: HashMap<(ScooterId, TripId, SensorKind, i64), bool> = HashMap::new();
    let mut disagreements = 0u64;
    let (mut kept, mut off_fence, mut off_schedule) = (0u64, 0u64, 0u64);
    let result = {
        let mut sink = LineSink::new(|line: &[u8]| {
            if event_type(line) != "sample" {
                return;
            }
            let Some(e) = parse::<SampleLine>(line) else { return };
            let Some(id) = e.scooter_id else { return };
            let p = e.payload;
            if p.kind == SensorKind::Gps {
                if let Some(pos) = p.value.position() {
                    last_fix.insert(id.clone(), pos);
                }
            }
            let in_time = schedule_oracle(p.t);
            let in_fence = last_fix.get(&id).is_some_and(|&f| ray_cast(f, &fence));
            let ok = in_time && in_fence;
            match (in_time, in_fence) {
                (true, true) => kept += 1,
                (true, false) => off_fence += 1,
                (false, _) => off_schedule += 1,
            }
            if ok != (p.disposition == "recorded") {
                disagreements += 1;
            }
            allowed.insert((id, p.trip_id, p.kind, p.t.millis()), ok);
        });
        sim::run(&scenario, &mut fc, &RunOptions::default(), Some(&mut sink))
    };
    let report = match result {
        Ok(r) => r,
        Err(e) => return Outcome::new("policy-gating", false, format!("run failed: {e}")),
    };
    let mut uploaded = 0u64;
    let mut violations = 0u64;
    for (scooter, trip) in &report.trips {
        for seq in fc.stored_seqs(scooter, trip) {
            let key = ChunkKey {
                scooter_id: scooter.clone(),
                trip_id: trip.clone(),
                seq,
            };
            for s in fc.stored_chunk(&key).map_or(&[][..], |c| c.samples.as_slice()) {
                uploaded += 1;
                let k = (s.scooter_id.clone(), s.trip_id.clone(), s.kind.clone(), s.t.millis());
                if allowed.get(&k) != Some(&true) {
                    violations += 1;
                }
            }
        }
    }
    let pass = violations == 0 && disagreements == 0 && uploaded > 0 && off_fence > 0 && off_schedule > 0 && report.exactly_once();
    Outcome::new(
        "policy-gating",
        pass,
        format!(
            "{uploaded} uploaded samples, {violations} outside fence or schedule; oracle: {kept} allowed, {off_fence} outside fence, {off_schedule} outside schedule; {disagreements} node decisions disagree"
        ),
    )
}

/// A straight 5 m/s, 100 s ride at 1 Hz with no noise, ingested the way a
/// node would send it.
pub fn constant_speed_trip(fc: &mut FleetController, scooter: &str, start: Timestamp) -> Result<TripId, FcError> {
    let id = ScooterId::new(scooter);
    let trip_id = TripId::new(format!("{scooter}-t00001"));
    fc.register_scooter(Scooter::new(id.clone(), "G30", 100.0).expect("valid battery"))?;
    let samples: Vec<SensorSample> = (0..=100)
        .map(|s| SensorSample {
            scooter_id: id.clone(),
            trip_id: trip_id.clone(),
            kind: SensorKind::Gps,
            t: start.plus_ms(s * 1_000),
            value: SampleValue::Fix {
                position: destination(campus(), 30.0, 5.0 * s as f64),
                speed_mps: 5.0,
                heading_deg: 30.0,
                hdop: 0.8,
            },
        })
        .collect();
    let token = fc.scooter_token(&id);
    let chunks: Vec<&[SensorSample]> = samples.chunks(60).collect();
    for (seq, part) in chunks.iter().enumerate() {
        let key = ChunkKey {
            scooter_id: id.clone(),
            trip_id: trip_id.clone(),
            seq: seq as u32,
        };
        let sealed = part.last().expect("non-empty").t;
        fc.receive_chunk(&token, TripChunk::seal(key, part.to_vec(), sealed, 1), sealed)?;
    }
    let end = start.plus_ms(100_000);
    fc.finalize_trip(&token, &id, &trip_id, chunks.len() as u32, end)?;
    Ok(trip_id)
}

pub fn stats_consistency(run: &FleetRun) -> Outcome {
    let all = TripFilter {
        from: Some(Timestamp(0)),
        ..TripFilter::default()
    };
    let report = match ramp::stats(&run.fc, &admin(), &all, false) {
        Ok(r) => r,
        Err(e) => return Outcome::new("stats-consistency", false, e.to_string()),
    };
    let (mut n, mut d, mut s) = (0u64, 0.0_f64, 0.0_f64);
    for b in report.per_day.values() {
        n += b.trip_count;
        d += b.distance_m;
        s += b.duration_s;
    }
    let scooters: u64 = report.per_scooter.values().map(|b| b.trip_count).sum();
    let buckets_exact = n == report.trip_count && d == report.total_distance_m && s == report.total_duration_s && scooters == n;

    let mut fc = controller();
    let probe = constant_speed_trip(&mut fc, "probe", run.scenario.start);
    let one = TripFilter {
        scooter_ids: Some([ScooterId::new("probe")].into()),
        ..TripFilter::default()
    };
    let single = probe.map_err(|e| e.to_string()).and_then(|_| ramp::stats(&fc, &admin(), &one, false).map_err(|e| e.to_string()));
    let single = match single {
        Ok(r) => r,
        Err(e) => return Outcome::new("stats-consistency", false, format!("synthetic trip: {e}")),
    };
    let pass = buckets_exact
        && single.trip_count == 1
        && (single.total_distance_m - 500.0).abs() <= 0.5
        && (single.mean_speed_mps - 5.0).abs() <= 0.01;
    Outcome::new(
        "stats-consistency",
        pass,
        format!(
            "{} trips over {} day(s): bucket sums equal totals exactly: {buckets_exact}; 5 m/s x 100 s trip: {:.4} m, {:.5} m/s",
            report.trip_count,
            report.per_day.len(),
            single.total_distance_m,
            single.mean_speed_mps
        ),
    )
}

pub fn export_round_trip(run: &FleetRun) -> Outcome {
    let all = TripFilter {
        from: Some(Timestamp(0)),
        ..TripFilter::default()
    };
    let go = || -> Result<Outcome, ramp::RampError> {
        let jsonl = ramp::export(&run.fc, &admin(), &all, ExportFormat::JsonLines)?;
        let mut fresh = FleetController::in_memory("fresh", Vec::new());
        let imported = ramp::import_jsonl(&mut fresh, &admin(), &jsonl)?;
        let again = ramp::export(&fresh, &admin(), &all, ExportFormat::JsonLines)?;
        let identical_records = run
            .fc
            .trips()
            .all(|t| fresh.trip(&t.trip_id).is_some_and(|u| u.canonical_json() == t.canonical_json()));
        let csv = ramp::export(&run.fc, &admin(), &all, ExportFormat::Csv)?;
        let rows = csv.iter().filter(|&&b| b == b'\n').count().saturating_sub(1);
        let samples: usize = run.fc.trips().map(|t| t.sample_counts().values().sum::<usize>()).sum();
        let stable = ramp::export(&run.fc, &admin(), &all, ExportFormat::Csv)? == csv;
        let pass = again == jsonl && identical_records && imported == run.fc.trip_count() && rows == samples && stable;
        Ok(Outcome::new(
            "export-round-trip",
            pass,
            format!(
                "{imported} trips, {} jsonl bytes re-exported {}; csv {rows} rows for {samples} samples, repeat export identical: {stable}",
                jsonl.len(),
                if again == jsonl { "byte-identical" } else { "DIFFERENT" }
            ),
        ))
    };
    go().unwrap_or_else(|e| Outcome::new("export-round-trip", false, e.to_string()))
}

/// Random checkout, renew, return and inspect sequences.
pub fn loan_rules(sequences: u64, ops: usize) -> Outcome {
    let all = Acknowledgments::ALL;
    let (mut max_overrun, mut unacked_renewals, mut unacked_accepted) = (0i64, 0u64, 0u64);
    let (mut double_checkouts, mut double_accepted, mut successes) = (0u64, 0u64, 0u64);
    let mut multi_active = 0u64;
    for seed in 0..sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fc = FleetController::in_memory("loans", Vec::new());
        let scooters: Vec<ScooterId> = (0..3).map(|i| ScooterId::new(format!("s{i}"))).collect();
        for s in &scooters {
            fc.register_scooter(Scooter::new(s.clone(), "G30", 100.0).expect("battery")).expect("register");
        }
        let riders: Vec<UserId> = (0..3).map(|i| UserId::new(format!("r{i}"))).collect();
        let mut now = sim::scenario::DEFAULT_START;
        let mut loans: Vec<LoanId> = Vec::new();
        let random_acks = |rng: &mut ChaCha8Rng| {
            if rng.random_bool(0.6) {
                all
            } else {
                Acknowledgments {
                    consent: rng.random_bool(0.5),
                    safety_video: rng.random_bool(0.5),
                    survey: rng.random_bool(0.5),
                }
            }
        };
        for _ in 0..ops {
            now = now.plus_ms(rng.random_range(0..20 * DAY_MS));
            match rng.random_range(0..4) {
                0 => {
                    let s = &scooters[rng.random_range(0..scooters.len())];
                    let busy = fc.loans().any(|l| l.scooter_id == *s && l.is_active());
                    let acks = if busy { all } else { random_acks(&mut rng) };
                    let r = fc.checkout(&riders[rng.random_range(0..riders.len())], s, acks, now);
                    if busy {
                        double_checkouts += 1;
                        double_accepted += r.is_ok() as u64;
                    }
                    if let Ok(l) = r {
                        successes += 1;
                        max_overrun = max_overrun.max(l.due_at.millis() - l.started_at.millis() - LOAN_PERIOD_MS);
                        loans.push(l.loan_id);
                    }
                }
                1 if !loans.is_empty() => {
                    let id = &loans[rng.random_range(0..loans.len())];
                    let acks = random_acks(&mut rng);
                    let r = fc.renew(id, acks, now);
                    if !acks.missing().is_empty() {
                        unacked_renewals += 1;
                        unacked_accepted += r.is_ok() as u64;
                    }
                    if let Ok(l) = r {
                        successes += 1;
                        let start = l.renewed_at.unwrap_or(l.started_at);
                        max_overrun = max_overrun.max(l.due_at.millis() - start.millis() - LOAN_PERIOD_MS);
                    }
                }
                2 if !loans.is_empty() => {
                    let id = &loans[rng.random_range(0..loans.len())];
                    let _ = fc.return_and_inspect(id, rng.random_bool(0.8), now);
                }
                _ => {
                    let s = &scooters[rng.random_range(0..scooters.len())];
                    let _ = fc.inspect(s, true);
                }
            }
            for s in &scooters {
                if fc.loans().filter(|l| l.scooter_id == *s && l.is_active()).count() > 1 {
                    multi_active += 1;
                }
            }
        }
    }
    let pass = max_overrun <= 0 && unacked_accepted == 0 && double_accepted == 0 && multi_active == 0 && unacked_renewals > 0 && double_checkouts > 0;
    Outcome::new(
        "loan-rules",
        pass,
        format!(
            "{sequences} random sequences x {ops} ops, {successes} loans granted or renewed: longest period {:+} ms past 14 days; {unacked_accepted}/{unacked_renewals} renewals without acknowledgment accepted; {double_accepted}/{double_checkouts} double checkouts accepted",
            max_overrun
        ),
    )
}

pub fn determinism(run: &FleetRun) -> Outcome {
    let again = match run_fleet(&run.scenario) {
        Ok(r) => r,
        Err(e) => return Outcome::new("determinism", false, format!("rerun failed: {e}")),
    };
    let mut heavy = fleet_scenario();
    heavy.seed = 99;
    heavy.duration_s = 1_800.0;
    heavy.faults = Faults {
        restart_per_minute: 0.2,
        drop_request: 0.2,
        drop_ack: 0.2,
    };
    let once = |s: &Scenario| sim::run(s, &mut controller(), &RunOptions::default(), None).map(|r| (r.log_sha256, r.log_lines));
    let (a, b) = match (once(&heavy), once(&heavy)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::new("determinism", false, e.to_string()),
    };
    let same = again.report.log_sha256 == run.report.log_sha256 && again.report.log_lines == run.report.log_lines;
    let pass = same && a == b;
    Outcome::new(
        "determinism",
        pass,
        format!(
            "fleet run twice: {} lines, sha256 {} / {}; heavy-fault run twice: {} / {}",
            run.report.log_lines,
            &run.report.log_sha256[..16],
            &again.report.log_sha256[..16],
            &a.0[..16],
            &b.0[..16]
        ),
    )
}

/// Names accepted by [`run_selected`], in run order.
pub const CRITERIA: [&str; 9] = [
    "exactly-once",
    "speed-and-range",
    "geofence-oracle",
    "config-propagation",
    "policy-gating",
    "stats-consistency",
    "export-round-trip",
    "loan-rules",
    "determinism",
];

/// Runs the named criteria (all when `only` is empty), reporting each as it
/// finishes.
pub fn run_selected(only: &[String], mut report: impl FnMut(&Outcome)) -> Result<Vec<Outcome>, String> {
    for name in only {
        if !CRITERIA.contains(&name.as_str()) {
            return Err(format!("unknown criterion {name:?}; known: {}", CRITERIA.join(", ")));
        }
    }
    let wanted = |n: &str| only.is_empty() || only.iter().any(|o| o == n);
    let needs_fleet = ["exactly-once", "speed-and-range", "geofence-oracle", "stats-consistency", "export-round-trip", "determinism"];
    let fleet = if needs_fleet.iter().any(|n| wanted(n)) {
        Some(run_fleet(&fleet_scenario())?)
    } else {
        None
    };
    let mut out = Vec::new();
    for name in CRITERIA.into_iter().filter(|n| wanted(n)) {
        let f = || fleet.as_ref().expect("fleet run prepared");
        let o = match name {
            "exactly-once" => exactly_once(f()),
            "speed-and-range" => speed_and_range(f()),
            "geofence-oracle" => geofence(f()),
            "config-propagation" => config_propagation(),
            "policy-gating" => policy_gating(),
            "stats-consistency" => stats_consistency(f()),
            "export-round-trip" => export_round_trip(f()),
            "loan-rules" => loan_rules(200, 60),
            _ => determinism(f()),
        };
        report(&o);
        out.push(o);
    }
    Ok(out)
}
