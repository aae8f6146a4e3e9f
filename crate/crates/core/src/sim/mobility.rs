//! Waypoint routes driven with trapezoidal speed profiles.

use serde::{Deserialize, Serialize};

use crate::geo::{haversine_distance, initial_bearing, interpolate};
use crate::model::{GeoPoint, Timestamp};
use crate::protocol::RATED_RANGE_M;

/// Vehicle top speed, 18 mph.
pub const MAX_SPEED_MPS: f64 = 8.05;
/// Acceleration and braking magnitude.
pub const ACCEL_MPS2: f64 = 1.0;

/// Drive to `to`, leaving `depart_s` seconds after the scenario start, at a
/// commanded cruise speed (clamped to the vehicle cap).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leg {
    pub depart_s: f64,
    pub to: GeoPoint,
    pub cruise_mps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: GeoPoint,
    pub speed_mps: f64,
    pub heading_deg: f64,
    pub t: Timestamp,
}

#[derive(Debug, Clone)]
struct PlannedLeg {
    from: GeoPoint,
    to: GeoPoint,
    depart_s: f64,
    length_m: f64,
    peak_mps: f64,
    ramp_s: f64,
    duration_s: f64,
    arrive_heading: f64,
    odometer_before: f64,
}

impl PlannedLeg {
    fn arrival_s(&self) -> f64 {
        self.depart_s + self.duration_s
    }

    /// Distance covered and speed `tau` seconds after departure.
    fn progress(&self, tau: f64) -> (f64, f64) {
        let a = ACCEL_MPS2;
        if tau <= 0.0 {
            return (0.0, 0.0);
        }
        if tau >= self.duration_s {
            return (self.length_m, 0.0);
        }
        let ramp_dist = 0.5 * a * self.ramp_s * self.ramp_s;
        let cruise_end = self.duration_s - self.ramp_s;
        if tau < self.ramp_s {
            (0.5 * a * tau * tau, a * tau)
        } else if tau <= cruise_end {
            (ramp_dist + self.peak_mps * (tau - self.ramp_s), self.peak_mps)
        } else {
            let left = self.duration_s - tau;
            ((self.length_m - 0.5 * a * left * left).min(self.length_m), a * left)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("route leg {index}: {reason}")]
pub struct RouteError {
    pub index: usize,
    pub reason: String,
}

/// A scooter's planned movement from its start point.
#[derive(Debug, Clone)]
pub struct Route {
    start: Timestamp,
    origin: GeoPoint,
    legs: Vec<PlannedLeg>,
}

impl Route {
    pub fn plan(start: Timestamp, origin: GeoPoint, legs: &[Leg]) -> Result<Self, RouteError> {
        let mut planned = Vec::with_capacity(legs.len());
        let mut at = origin;
        let mut free_from = 0.0_f64;
        let mut odometer = 0.0;
        for (index, leg) in legs.iter().enumerate() {
            if !(leg.depart_s >= free_from) {
                return Err(RouteError {
                    index,
                    reason: format!("departs at {}s, before arrival at {free_from}s", leg.depart_s),
                });
            }
            if !(leg.cruise_mps > 0.0 && leg.cruise_mps.is_finite()) {
                return Err(RouteError {
                    index,
                    reason: format!("cruise speed {} must be positive", leg.cruise_mps),
                });
            }
            let length_m = haversine_distance(at, leg.to);
            let v = leg.cruise_mps.min(MAX_SPEED_MPS);
            let (peak_mps, ramp_s, duration_s) = if length_m <= 0.0 {
                (0.0, 0.0, 0.0)
            } else if length_m >= v * v / ACCEL_MPS2 {
                let ramp = v / ACCEL_MPS2;
                (v, ramp, 2.0 * ramp + (length_m - v * v / ACCEL_MPS2) / v)
            } else {
                let peak = (ACCEL_MPS2 * length_m).sqrt();
                (peak, peak / ACCEL_MPS2, 2.0 * peak / ACCEL_MPS2)
            };
            let arrive_heading = if length_m > 0.0 {
                (initial_bearing(leg.to, at) + 180.0).rem_euclid(360.0)
            } else {
                planned.last().map_or(0.0, |p: &PlannedLeg| p.arrive_heading)
            };
            planned.push(PlannedLeg {
                from: at,
                to: leg.to,
                depart_s: leg.depart_s,
                length_m,
                peak_mps,
                ramp_s,
                duration_s,
                arrive_heading,
                odometer_before: odometer,
            });
            odometer += length_m;
            free_from = leg.depart_s + duration_s;
            at = leg.to;
        }
        Ok(Self {
            start,
            origin,
            legs: planned,
        })
    }

    pub fn start(&self) -> Timestamp {
        self.start
    }

    /// When the last leg arrives.
    pub fn end(&self) -> Timestamp {
        let s = self.legs.last().map_or(0.0, PlannedLeg::arrival_s);
        self.start.plus_ms((s * 1000.0).ceil() as i64)
    }

    pub fn total_length_m(&self) -> f64 {
        self.legs.last().map_or(0.0, |l| l.odometer_before + l.length_m)
    }

    fn locate(&self, t: Timestamp) -> (f64, Option<&PlannedLeg>, Option<&PlannedLeg>) {
        let tau = t.seconds_since(self.start);
        let idx = self.legs.partition_point(|l| l.depart_s <= tau);
        let current = idx.checked_sub(1).map(|i| &self.legs[i]);
        (tau, current, self.legs.get(idx))
    }

    /// Distance travelled along the route by `t`.
    pub fn odometer_at(&self, t: Timestamp) -> f64 {
        match self.locate(t) {
            (tau, Some(leg), _) => leg.odometer_before + leg.progress(tau - leg.depart_s).0,
            _ => 0.0,
        }
    }

    pub fn pose_at(&self, t: Timestamp) -> Pose {
        let (tau, current, next) = self.locate(t);
        let Some(leg) = current else {
            let heading = next.map_or(0.0, |l| initial_bearing(l.from, l.to));
            return Pose {
                position: self.origin,
                speed_mps: 0.0,
                heading_deg: if next.is_some_and(|l| l.length_m > 0.0) { heading } else { 0.0 },
                t,
            };
        };
        let (dist, speed) = leg.progress(tau - leg.depart_s);
        if dist >= leg.length_m {
            return Pose {
                position: leg.to,
                speed_mps: 0.0,
                heading_deg: leg.arrive_heading,
                t,
            };
        }
        let position = if dist <= 0.0 {
            leg.from
        } else {
            interpolate(leg.from, leg.to, dist / leg.length_m)
        };
        let heading_deg = if leg.length_m - dist > 0.01 {
            initial_bearing(position, leg.to)
        } else {
            leg.arrive_heading
        };
        Pose {
            position,
            speed_mps: speed.clamp(0.0, MAX_SPEED_MPS),
            heading_deg,
            t,
        }
    }
}

/// Pose along `route` at `t`; outside the route's span the scooter rests at
/// the nearest endpoint.
pub fn mobility_step(route: &Route, t: Timestamp) -> Pose {
    route.pose_at(t)
}

/// Linear discharge over the rated range.
pub fn battery_step(battery_pct: f64, distance_delta_m: f64) -> f64 {
    (battery_pct - 100.0 * distance_delta_m / RATED_RANGE_M).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::destination;

    const T0: Timestamp = Timestamp(1_741_009_800_000);

    fn origin() -> GeoPoint {
        GeoPoint::new(29.5830, -98.6190).unwrap()
    }

    #[test]
    fn waypoints_are_hit_exactly() {
        let a = destination(origin(), 45.0, 400.0);
        let b = destination(a, 180.0, 250.0);
        let route = Route::plan(
            T0,
            origin(),
            &[
                Leg { depart_s: 10.0, to: a, cruise_mps: 6.0 },
                Leg { depart_s: 200.0, to: b, cruise_mps: 4.0 },
            ],
        )
        .unwrap();
        assert_eq!(route.pose_at(T0).position, origin());
        assert_eq!(route.pose_at(T0.plus_ms(10_000)).position, origin());
        assert_eq!(route.pose_at(T0.plus_ms(200_000)).position, a);
        assert_eq!(route.pose_at(route.end()).position, b);
        assert_eq!(route.pose_at(route.end().plus_ms(3_600_000)).position, b);
    }

    #[test]
    fn commanded_speed_is_capped() {
        let far = destination(origin(), 90.0, 2_000.0);
        let route = Route::plan(T0, origin(), &[Leg { depart_s: 0.0, to: far, cruise_mps: 10.0 }]).unwrap();
        let mut max: f64 = 0.0;
        let mut t = T0;
        while t <= route.end() {
            max = max.max(route.pose_at(t).speed_mps);
            t = t.plus_ms(100);
        }
        assert_eq!(max, MAX_SPEED_MPS);
    }

    #[test]
    fn traversal_time_matches_kinematics() {
        // independent closed form: two ramps of v/a plus cruise over the rest
        for (len, v) in [(1_000.0, 5.0), (2_000.0, 8.0), (30.0, 8.0), (500.0, 3.3)] {
            let to = destination(origin(), 10.0, len);
            let route = Route::plan(T0, origin(), &[Leg { depart_s: 0.0, to, cruise_mps: v }]).unwrap();
            let length = haversine_distance(origin(), to);
            let expected: f64 = if length >= v * v {
                length / v + v
            } else {
                2.0 * length.sqrt()
            };
            let actual = route.end().seconds_since(T0);
            assert!((actual - expected).abs() <= 0.001, "{len} m at {v}: {actual} vs {expected}");
            assert!((length / v - actual).abs() <= v + 2.0 * length.sqrt());
        }
    }

    #[test]
    fn motion_is_continuous() {
        let to = destination(origin(), 300.0, 800.0);
        let route = Route::plan(T0, origin(), &[Leg { depart_s: 5.0, to, cruise_mps: 7.0 }]).unwrap();
        let mut prev = route.pose_at(T0);
        let mut t = T0.plus_ms(10);
        while t <= route.end().plus_ms(1_000) {
            let p = route.pose_at(t);
            assert!((p.speed_mps - prev.speed_mps).abs() <= ACCEL_MPS2 * 0.01 + 1e-9);
            assert!(haversine_distance(p.position, prev.position) <= MAX_SPEED_MPS * 0.01 + 1e-3);
            prev = p;
            t = t.plus_ms(10);
        }
        let odo = route.odometer_at(route.end());
        assert!((odo - route.total_length_m()).abs() < 1e-9);
    }

    #[test]
    fn overlapping_legs_rejected() {
        let to = destination(origin(), 0.0, 1_000.0);
        let back = origin();
        let err = Route::plan(
            T0,
            origin(),
            &[
                Leg { depart_s: 0.0, to, cruise_mps: 5.0 },
                Leg { depart_s: 100.0, to: back, cruise_mps: 5.0 },
            ],
        );
        assert!(err.is_err());
    }

    #[test]
    fn battery_linear_model() {
        assert_eq!(battery_step(100.0, 64_374.0), 0.0);
        assert_eq!(battery_step(42.0, 0.0), 42.0);
        assert!((battery_step(100.0, 16_093.5) - 75.0).abs() < 1e-12);
        assert_eq!(battery_step(1.0, 10_000.0), 0.0);
    }
}
