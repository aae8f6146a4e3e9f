use chrono::{NaiveDate, NaiveTime, Offset, TimeZone, Weekday};
use proptest::prelude::*;

use scooterlab::geo::{destination, haversine_distance, point_in_fence, trip_length, GeoFence};
use scooterlab::model::{GeoPoint, Timestamp, DAY_MS};
use scooterlab::schedule::{schedule_contains, Schedule, ScheduleSpec, ScheduleWindowSpec};

fn point() -> impl Strategy<Value = GeoPoint> {
    (-89.9..89.9f64, -180.0..180.0f64).prop_map(|(lat, lon)| GeoPoint::new(lat, lon).unwrap())
}

fn campus_point() -> impl Strategy<Value = GeoPoint> {
    (29.55..29.62f64, -98.66..-98.58f64).prop_map(|(lat, lon)| GeoPoint::new(lat, lon).unwrap())
}

/// Crossing-number test with edges counted as inside.
fn ray_cast(p: GeoPoint, fence: &GeoFence) -> bool {
    let (x, y) = (p.lon(), p.lat());
    let mut inside = false;
    for ring in fence.rings() {
        for i in 0..ring.len() {
            let (a, b) = (ring[i], ring[(i + 1) % ring.len()]);
            let (ax, ay, bx, by) = (a.lon(), a.lat(), b.lon(), b.lat());
            let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            if cross == 0.0 && x >= ax.min(bx) && x <= ax.max(bx) && y >= ay.min(by) && y <= ay.max(by) {
                return true;
            }
            if (ay > y) != (by > y) && x < ax + (y - ay) * (bx - ax) / (by - ay) {
                inside = !inside;
            }
        }
    }
    inside
}

/// Star-shaped polygon: sorted bearings, random radii.
fn polygon() -> impl Strategy<Value = GeoFence> {
    (campus_point(), prop::collection::btree_set(0u32..360, 3..14), prop::collection::vec(30.0..800.0f64, 14))
        .prop_filter_map("degenerate ring", |(c, bearings, radii)| {
            let ring = bearings.iter().zip(&radii).map(|(&b, &r)| destination(c, b as f64, r)).collect();
            GeoFence::new(ring, Vec::new()).ok()
        })
}

proptest! {
    #[test]
    fn haversine_is_symmetric(a in point(), b in point()) {
        prop_assert_eq!(haversine_distance(a, b), haversine_distance(b, a));
    }

    #[test]
    fn haversine_triangle_inequality(a in point(), b in point(), c in point()) {
        let direct = haversine_distance(a, c);
        let via = haversine_distance(a, b) + haversine_distance(b, c);
        prop_assert!(direct <= via * (1.0 + 1e-9) + 1e-9, "{direct} > {via}");
    }

    #[test]
    fn fence_matches_ray_casting(fence in polygon(), pts in prop::collection::vec(campus_point(), 50)) {
        for p in pts.into_iter().chain(fence.exterior().iter().copied()) {
            prop_assert_eq!(point_in_fence(p, &fence), ray_cast(p, &fence), "{:?}", p);
        }
    }

    #[test]
    fn trip_length_splits_additively(fixes in prop::collection::vec(campus_point(), 3..60), at in 1usize..59) {
        let k = at.min(fixes.len() - 2);
        let whole = trip_length(fixes.iter().copied());
        let parts = trip_length(fixes[..=k].iter().copied()) + trip_length(fixes[k..].iter().copied());
        prop_assert!((whole - parts).abs() <= 1e-9 * whole.max(1.0), "{whole} vs {parts}");
    }
}

const DAYS: [Weekday; 7] = [Weekday::Mon, Weekday::Tue, Weekday::Wed, Weekday::Thu, Weekday::Fri, Weekday::Sat, Weekday::Sun];
const ZONES: [&str; 4] = ["UTC", "America/Chicago", "Europe/Berlin", "Asia/Kolkata"];

fn schedule() -> impl Strategy<Value = (Schedule, &'static str)> {
    let window = (prop::collection::btree_set(0usize..7, 1..4), 0u32..1439, 1u32..720);
    (prop::collection::vec(window, 1..4), 0usize..ZONES.len()).prop_map(|(windows, z)| {
        let tz = ZONES[z];
        let spec = ScheduleSpec {
            active_from: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            active_until: NaiveDate::from_ymd_opt(2026, 12, 31).unwrap(),
            windows: windows
                .into_iter()
                .map(|(days, start, len)| {
                    let end = (start + len).min(1439);
                    let t = |m: u32| NaiveTime::from_hms_opt(m / 60, m % 60, 0).unwrap();
                    ScheduleWindowSpec {
                        days: days.into_iter().map(|d| DAYS[d]).collect(),
                        start: t(start),
                        end: t(end.max(start + 1)),
                        tz: tz.into(),
                    }
                })
                .collect(),
        };
        (Schedule::new(spec).unwrap(), tz)
    })
}

fn offset_at(tz: &str, ms: i64) -> i32 {
    let tz: chrono_tz::Tz = tz.parse().unwrap();
    tz.timestamp_millis_opt(ms).unwrap().offset().fix().local_minus_utc()
}

proptest! {
    #[test]
    fn schedule_repeats_weekly((sched, tz) in schedule(), ms in 1_704_153_600_000i64..1_798_000_000_000i64) {
        let later = ms + 7 * DAY_MS;
        // a DST change between the two instants shifts local time by design
        prop_assume!(offset_at(tz, ms) == offset_at(tz, later));
        prop_assert_eq!(schedule_contains(&sched, Timestamp(ms)), schedule_contains(&sched, Timestamp(later)));
    }
}
