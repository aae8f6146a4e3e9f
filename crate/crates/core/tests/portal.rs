use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use scooterlab::controller::FleetController;
use scooterlab::geo::{destination, point_in_fence, trip_length, GeoFence};
use scooterlab::model::{
    GeoPoint, ProjectId, ProjectState, Role, SampleValue, Scooter, ScooterId, SensorKind, SensorSample, Timestamp,
    Trip, TripId, UserId, HOUR_MS,
};
use scooterlab::ramp::{
    self, activate_project, complete_project, create_project, trip_geojson, Caller, ExportFormat, NewProject,
    NewUser, Ramp, RegionMode, TripFilter,
};
use scooterlab::sim::scenario::open_policy;

const T0: Timestamp = Timestamp(1_741_010_400_000);
const SCOOTERS: usize = 6;

fn origin() -> GeoPoint {
    GeoPoint::new(29.583, -98.619).unwrap()
}

#[derive(Debug, Clone)]
struct RideSpec {
    scooter: usize,
    project: Option<prop::sample::Index>,
    start_min: i64,
    secs: i64,
    bearing: f64,
    speed: f64,
}

fn ride_spec() -> impl Strategy<Value = RideSpec> {
    (0..SCOOTERS, prop::option::weighted(0.8, any::<prop::sample::Index>()), 0i64..(3 * 24 * 60), 10i64..900, 0.0..360.0f64, 1.0..8.0f64)
        .prop_map(|(scooter, project, start_min, secs, bearing, speed)| RideSpec { scooter, project, start_min, secs, bearing, speed })
}

fn ride(n: usize, spec: &RideSpec, project: Option<ProjectId>) -> Trip {
    let scooter_id = ScooterId::new(format!("s{}", spec.scooter));
    let trip_id = TripId::new(format!("s{}-t{n:05}", spec.scooter));
    let start = T0.plus_ms(spec.start_min * 60_000);
    let gps: Vec<SensorSample> = (0..=spec.secs)
        .step_by(5)
        .map(|s| SensorSample {
            scooter_id: scooter_id.clone(),
            trip_id: trip_id.clone(),
            kind: SensorKind::Gps,
            t: start.plus_ms(s * 1_000),
            value: SampleValue::Fix {
                position: destination(origin(), spec.bearing, spec.speed * s as f64),
                speed_mps: spec.speed,
                heading_deg: spec.bearing,
                hdop: 0.9,
            },
        })
        .collect();
    let last = gps.last().unwrap().t;
    Trip {
        trip_id,
        scooter_id,
        loan_id: None,
        project_id: project,
        started_at: start,
        ended_at: last,
        distance_m: trip_length(gps.iter().filter_map(|s| s.value.position())),
        samples: [(SensorKind::Gps, gps)].into(),
        enrichment: Vec::new(),
        quality_flags: BTreeSet::new(),
    }
}

struct World {
    fc: FleetController,
    admin: Caller,
    researchers: Vec<Caller>,
    rider: Caller,
    projects: Vec<ProjectId>,
}

/// Admin, three researchers owning one project each, a rider, and random trips.
fn world(rides: &[RideSpec]) -> World {
    let mut fc = FleetController::in_memory("props", Vec::new());
    let mut r = Ramp::new();
    for i in 0..SCOOTERS {
        fc.register_scooter(Scooter::new(ScooterId::new(format!("s{i}")), "G30", 100.0).unwrap()).unwrap();
    }
    let user = |name: &str, role| NewUser { name: name.into(), role, credential: "pw".into(), display_name: None };
    r.create_user(&mut fc, None, user("root", Role::Admin)).unwrap();
    let admin = Caller { user_id: UserId::new("root"), role: Role::Admin };
    let mut researchers = Vec::new();
    let mut projects = Vec::new();
    for i in 0..3 {
        let name = format!("res{i}");
        r.create_user(&mut fc, Some(&admin), user(&name, Role::Researcher)).unwrap();
        let c = Caller { user_id: UserId::new(&name), role: Role::Researcher };
        let p = create_project(
            &mut fc,
            &c,
            NewProject {
                title: format!("p{i}"),
                policy: open_policy(&[(SensorKind::Gps, 1.0)]),
                fleet: [ScooterId::new(format!("s{i}"))].into(),
            },
        )
        .unwrap();
        projects.push(p.project_id);
        researchers.push(c);
    }
    r.create_user(&mut fc, Some(&admin), user("rita", Role::Rider)).unwrap();
    let rider = Caller { user_id: UserId::new("rita"), role: Role::Rider };
    for (n, spec) in rides.iter().enumerate() {
        let project = spec.project.map(|i| projects[i.index(projects.len())].clone());
        fc.import_trip(ride(n + 1, spec, project)).unwrap();
    }
    World { fc, admin, researchers, rider, projects }
}

fn star(center: GeoPoint, radii: &[f64]) -> GeoFence {
    let step = 360.0 / radii.len() as f64;
    GeoFence::new(radii.iter().enumerate().map(|(i, &r)| destination(center, i as f64 * step, r)).collect(), Vec::new()).unwrap()
}

#[derive(Debug, Clone)]
struct FilterSpec {
    project: Option<prop::sample::Index>,
    scooters: Option<BTreeSet<usize>>,
    window: Option<(i64, i64)>,
    region: Option<(f64, f64, Vec<f64>, bool)>,
    min_distance: Option<f64>,
}

fn filter_spec() -> impl Strategy<Value = FilterSpec> {
    (
        prop::option::of(any::<prop::sample::Index>()),
        prop::option::of(prop::collection::btree_set(0..SCOOTERS, 1..4)),
        prop::option::of((0i64..(3 * 24 * 60), 1i64..(24 * 60))),
        prop::option::of((0.0..360.0f64, 0.0..3_000.0f64, prop::collection::vec(200.0..3_000.0f64, 3..9), any::<bool>())),
        prop::option::of(0.0..4_000.0f64),
    )
        .prop_map(|(project, scooters, window, region, min_distance)| FilterSpec { project, scooters, window, region, min_distance })
}

fn build(spec: &FilterSpec, projects: &[ProjectId]) -> TripFilter {
    let mut f = TripFilter {
        project_id: spec.project.map(|i| projects[i.index(projects.len())].clone()),
        scooter_ids: spec.scooters.as_ref().map(|s| s.iter().map(|i| ScooterId::new(format!("s{i}"))).collect()),
        from: spec.window.map(|(a, _)| T0.plus_ms(a * 60_000)),
        to: spec.window.map(|(a, len)| T0.plus_ms((a + len) * 60_000)),
        min_distance_m: spec.min_distance,
        ..TripFilter::default()
    };
    if let Some((bearing, dist, radii, contained)) = &spec.region {
        f.region = Some(star(destination(origin(), *bearing, *dist), radii));
        f.region_mode = if *contained { RegionMode::Contained } else { RegionMode::Intersects };
    }
    if f.project_id.is_none() && f.scooter_ids.is_none() && f.from.is_none() && f.region.is_none() && f.min_distance_m.is_none() {
        f.min_distance_m = Some(0.0);
    }
    f
}

fn visible(w: &World, caller: &Caller, trip: &Trip) -> bool {
    match caller.role {
        Role::Admin => true,
        Role::Researcher => trip
            .project_id
            .as_ref()
            .and_then(|p| w.fc.project(p))
            .is_some_and(|p| p.owner == caller.user_id),
        Role::Rider => false,
    }
}

fn brute(w: &World, caller: &Caller, f: &TripFilter) -> BTreeSet<TripId> {
    w.fc
        .trips()
        .filter(|t| visible(w, caller, t))
        .filter(|t| {
            let fixes: Vec<GeoPoint> = t.gps_fixes().collect();
            f.project_id.as_ref().is_none_or(|p| t.project_id.as_ref() == Some(p))
                && f.scooter_ids.as_ref().is_none_or(|s| s.contains(&t.scooter_id))
                && f.from.is_none_or(|from| t.ended_at >= from)
                && f.to.is_none_or(|to| t.started_at < to)
                && f.min_distance_m.is_none_or(|d| t.distance_m >= d)
                && f.region.as_ref().is_none_or(|r| match f.region_mode {
                    RegionMode::Intersects => fixes.iter().any(|&p| point_in_fence(p, r)),
                    RegionMode::Contained => !fixes.is_empty() && fixes.iter().all(|&p| point_in_fence(p, r)),
                })
        })
        .map(|t| t.trip_id.clone())
        .collect()
}

fn paged(w: &World, caller: &Caller, f: &TripFilter, limit: usize) -> Result<Vec<TripId>, ramp::RampError> {
    let mut out = Vec::new();
    let mut cursor = None;
    loop {
        let page = ramp::query_trips(&w.fc, caller, f, cursor.as_deref(), Some(limit))?;
        out.extend(page.trips.into_iter().map(|s| s.trip_id));
        match page.next_cursor {
            Some(c) => cursor = Some(c),
            None => return Ok(out),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn query_matches_full_scan(rides in prop::collection::vec(ride_spec(), 1..40), filters in prop::collection::vec(filter_spec(), 1..6), limit in 1usize..9) {
        let w = world(&rides);
        for spec in &filters {
            let f = build(spec, &w.projects);
            let got = paged(&w, &w.admin, &f, limit).unwrap();
            let unique: BTreeSet<TripId> = got.iter().cloned().collect();
            prop_assert_eq!(unique.len(), got.len(), "a trip appeared on two pages");
            prop_assert_eq!(unique, brute(&w, &w.admin, &f));
        }
    }

    #[test]
    fn no_caller_sees_trips_of_projects_they_do_not_own(rides in prop::collection::vec(ride_spec(), 1..40), spec in filter_spec()) {
        let w = world(&rides);
        let f = build(&spec, &w.projects);
        for caller in w.researchers.iter().chain([&w.admin, &w.rider]) {
            let own = f.project_id.as_ref().is_none_or(|p| caller.role == Role::Admin || w.fc.project(p).is_some_and(|p| p.owner == caller.user_id));
            let result = paged(&w, caller, &f, 50);
            if caller.role == Role::Rider || !own {
                prop_assert_eq!(result.unwrap_err().code(), "Forbidden");
                prop_assert!(ramp::export(&w.fc, caller, &f, ExportFormat::JsonLines).is_err());
                prop_assert!(ramp::stats(&w.fc, caller, &f, false).is_err());
                continue;
            }
            let got: BTreeSet<TripId> = result.unwrap().into_iter().collect();
            prop_assert_eq!(&got, &brute(&w, caller, &f));
            for id in &got {
                prop_assert!(visible(&w, caller, w.fc.trip(id).unwrap()));
            }
            let exported = ramp::export(&w.fc, caller, &f, ExportFormat::JsonLines).unwrap();
            prop_assert_eq!(exported.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count(), got.len());
            prop_assert_eq!(ramp::stats(&w.fc, caller, &f, false).unwrap().trip_count, got.len() as u64);
            // naming trips directly does not get around ownership
            let every: Vec<TripId> = w.fc.trips().map(|t| t.trip_id.clone()).collect();
            let geo = trip_geojson(&w.fc, caller, &every, false);
            let all_visible = every.iter().all(|id| visible(&w, caller, w.fc.trip(id).unwrap()));
            prop_assert_eq!(geo.is_ok(), all_visible);
        }
    }

    #[test]
    fn stats_add_up_over_time_partitions(rides in prop::collection::vec(ride_spec(), 1..40), cuts in prop::collection::btree_set(1i64..(3 * 24 * 60 + 60), 1..6)) {
        let w = world(&rides);
        let whole_range = (T0, T0.plus_ms((3 * 24 * 60 + 120) * 60_000));
        let mut edges: Vec<Timestamp> = vec![whole_range.0];
        edges.extend(cuts.iter().map(|m| T0.plus_ms(m * 60_000)));
        edges.push(whole_range.1);
        let filter = |from, to| TripFilter { from: Some(from), to: Some(to), ..TripFilter::default() };
        let whole = ramp::stats(&w.fc, &w.admin, &filter(whole_range.0, whole_range.1), false).unwrap();
        let parts: Vec<_> = edges.windows(2).map(|e| ramp::stats(&w.fc, &w.admin, &filter(e[0], e[1]), false).unwrap()).collect();

        // a trip overlapping k parts is counted in each of them
        let mut expected_count = 0u64;
        let mut expected_distance = 0.0;
        let mut straddlers = 0;
        for t in w.fc.trips() {
            let k = edges.windows(2).filter(|e| t.ended_at >= e[0] && t.started_at < e[1]).count() as u64;
            expected_count += k;
            expected_distance += k as f64 * t.distance_m;
            straddlers += (k > 1) as u32;
        }
        let count: u64 = parts.iter().map(|p| p.trip_count).sum();
        let distance: f64 = parts.iter().map(|p| p.total_distance_m).sum();
        prop_assert_eq!(count, expected_count);
        prop_assert!((distance - expected_distance).abs() <= 1e-6 * expected_distance.max(1.0));
        if straddlers == 0 {
            prop_assert_eq!(count, whole.trip_count);
            prop_assert!((distance - whole.total_distance_m).abs() <= 1e-6 * whole.total_distance_m.max(1.0));
            // per-day buckets add up too
            let mut days: BTreeMap<_, u64> = BTreeMap::new();
            for p in &parts {
                for (d, b) in &p.per_day {
                    *days.entry(*d).or_default() += b.trip_count;
                }
            }
            let whole_days: BTreeMap<_, u64> = whole.per_day.iter().map(|(d, b)| (*d, b.trip_count)).collect();
            prop_assert_eq!(days, whole_days);
        }
        // within one report, buckets always sum to the totals
        for p in parts.iter().chain([&whole]) {
            prop_assert_eq!(p.per_day.values().map(|b| b.trip_count).sum::<u64>(), p.trip_count);
            prop_assert_eq!(p.per_scooter.values().map(|b| b.trip_count).sum::<u64>(), p.trip_count);
        }
    }

    #[test]
    fn exports_are_deterministic(rides in prop::collection::vec(ride_spec(), 1..30), spec in filter_spec()) {
        let a = world(&rides);
        let b = world(&rides);
        let f = build(&spec, &a.projects);
        for format in [ExportFormat::Csv, ExportFormat::JsonLines, ExportFormat::GeoJson] {
            let x = ramp::export(&a.fc, &a.admin, &f, format).unwrap();
            prop_assert_eq!(&x, &ramp::export(&a.fc, &a.admin, &f, format).unwrap());
            prop_assert_eq!(&x, &ramp::export(&b.fc, &b.admin, &f, format).unwrap());
        }
    }
}

#[derive(Debug, Clone)]
enum ProjectOp {
    Create { owner: usize, fleet: BTreeSet<usize> },
    Activate(prop::sample::Index),
    Complete(prop::sample::Index),
}

fn project_op() -> impl Strategy<Value = ProjectOp> {
    prop_oneof![
        (0usize..3, prop::collection::btree_set(0..SCOOTERS, 1..4)).prop_map(|(owner, fleet)| ProjectOp::Create { owner, fleet }),
        any::<prop::sample::Index>().prop_map(ProjectOp::Activate),
        any::<prop::sample::Index>().prop_map(ProjectOp::Complete),
    ]
}

proptest! {
    #[test]
    fn scooter_in_at_most_one_active_project(ops in prop::collection::vec(project_op(), 1..40)) {
        let mut w = world(&[]);
        let mut ids = w.projects.clone();
        for (step, op) in ops.into_iter().enumerate() {
            let now = T0.plus_ms(step as i64 * HOUR_MS);
            match op {
                ProjectOp::Create { owner, fleet } => {
                    let p = create_project(&mut w.fc, &w.researchers[owner], NewProject {
                        title: format!("step {step}"),
                        policy: open_policy(&[(SensorKind::Gps, 1.0)]),
                        fleet: fleet.iter().map(|i| ScooterId::new(format!("s{i}"))).collect(),
                    }).unwrap();
                    ids.push(p.project_id);
                }
                ProjectOp::Activate(i) => {
                    let id = ids[i.index(ids.len())].clone();
                    let _ = activate_project(&mut w.fc, &w.admin, &id, now);
                }
                ProjectOp::Complete(i) => {
                    let id = ids[i.index(ids.len())].clone();
                    let _ = complete_project(&mut w.fc, &w.admin, &id);
                }
            }
            let mut holder: BTreeMap<ScooterId, ProjectId> = BTreeMap::new();
            for p in w.fc.projects().filter(|p| p.state == ProjectState::Active) {
                for s in &p.fleet {
                    let prior = holder.insert(s.clone(), p.project_id.clone());
                    prop_assert!(prior.is_none(), "{s} in {prior:?} and {}", p.project_id);
                }
            }
        }
    }
}
