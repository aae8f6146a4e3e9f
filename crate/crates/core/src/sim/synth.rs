//! Synthetic sensor readings derived from poses.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{SensorSource, SourceError};
use crate::geo::destination;
use crate::model::{SampleValue, ScooterId, SensorKind, Timestamp};

use super::mobility::Pose;

pub const GRAVITY_MPS2: f64 = 9.81;
const CAMERA_FRAME_BYTES: u64 = 65_536;
const AUDIO_SEGMENT_BYTES: u64 = 16_000;
const FIELD_HORIZONTAL_UT: f64 = 24.0;
const FIELD_VERTICAL_UT: f64 = 42.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    /// Standard deviation of each horizontal GPS offset, meters.
    pub gps_sigma_m: f64,
    /// Standard deviation added to every IMU axis.
    pub imu_sigma: f64,
}

impl Default for Noise {
    fn default() -> Self {
        Self {
            gps_sigma_m: 0.5,
            imu_sigma: 0.02,
        }
    }
}

/// Baseline ambient conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ambient {
    pub temperature_c: f64,
    pub pressure_hpa: f64,
    pub humidity_pct: f64,
    pub light_lux: f64,
}

impl Default for Ambient {
    fn default() -> Self {
        Self {
            temperature_c: 29.0,
            pressure_hpa: 1_012.0,
            humidity_pct: 55.0,
            light_lux: 20_000.0,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
    } else {
        0.0
    }
}

fn heading_rate(pose: &Pose, prev: &Pose) -> f64 {
    let dt = pose.t.seconds_since(prev.t);
    if dt <= 0.0 {
        return 0.0;
    }
    let d = (pose.heading_deg - prev.heading_deg + 540.0).rem_euclid(360.0) - 180.0;
    d.to_radians() / dt
}

/// Slow drift with a one-hour period.
fn drift(t: Timestamp, amplitude: f64) -> f64 {
    amplitude * (2.0 * PI * (t.millis() as f64 / 3_600_000.0)).sin()
}

fn blob_digest(kind: &SensorKind, scooter_id: &ScooterId, t: Timestamp) -> String {
    let mut h = Sha256::new();
    h.update(format!("{kind}|{scooter_id}|{}", t.millis()));
    hex::encode(h.finalize())
}

/// Reading of one kind at `pose`, given the previous pose for derivatives.
pub fn synthesize(
    kind: &SensorKind,
    scooter_id: &ScooterId,
    pose: &Pose,
    prev: &Pose,
    noise: &Noise,
    ambient: &Ambient,
    rng: &mut ChaCha8Rng,
) -> SampleValue {
    let dt = pose.t.seconds_since(prev.t);
    let t = pose.t;
    match kind {
        SensorKind::Gps => {
            let mut position = pose.position;
            if noise.gps_sigma_m > 0.0 {
                let north = gaussian(rng, noise.gps_sigma_m);
                let east = gaussian(rng, noise.gps_sigma_m);
                position = destination(destination(position, 0.0, north), 90.0, east);
            }
            SampleValue::Fix {
                position,
                speed_mps: pose.speed_mps,
                heading_deg: pose.heading_deg,
                hdop: 0.8,
            }
        }
        SensorKind::Accelerometer => {
            let along = if dt > 0.0 { (pose.speed_mps - prev.speed_mps) / dt } else { 0.0 };
            let across = pose.speed_mps * heading_rate(pose, prev);
            SampleValue::vector3(
                [
                    along + gaussian(rng, noise.imu_sigma),
                    across + gaussian(rng, noise.imu_sigma),
                    GRAVITY_MPS2 + gaussian(rng, noise.imu_sigma),
                ],
                "m/s^2",
            )
        }
        SensorKind::Gyroscope => SampleValue::vector3(
            [
                gaussian(rng, noise.imu_sigma),
                gaussian(rng, noise.imu_sigma),
                heading_rate(pose, prev) + gaussian(rng, noise.imu_sigma),
            ],
            "rad/s",
        ),
        SensorKind::Magnetometer => {
            let h = pose.heading_deg.to_radians();
            SampleValue::vector3(
                [
                    FIELD_HORIZONTAL_UT * h.cos() + gaussian(rng, noise.imu_sigma),
                    -FIELD_HORIZONTAL_UT * h.sin() + gaussian(rng, noise.imu_sigma),
                    FIELD_VERTICAL_UT + gaussian(rng, noise.imu_sigma),
                ],
                "uT",
            )
        }
        SensorKind::Temperature => SampleValue::scalar(ambient.temperature_c + drift(t, 0.5), "degC"),
        SensorKind::Pressure => SampleValue::scalar(ambient.pressure_hpa + drift(t, 0.3), "hPa"),
        SensorKind::Humidity => {
            SampleValue::scalar((ambient.humidity_pct + drift(t, 2.0)).clamp(0.0, 100.0), "%RH")
        }
        SensorKind::Light => SampleValue::scalar((ambient.light_lux + drift(t, 500.0)).max(0.0), "lux"),
        SensorKind::Camera => SampleValue::BlobRef {
            byte_len: CAMERA_FRAME_BYTES,
            digest: blob_digest(kind, scooter_id, t),
        },
        SensorKind::Microphone => SampleValue::BlobRef {
            byte_len: AUDIO_SEGMENT_BYTES,
            digest: blob_digest(kind, scooter_id, t),
        },
        SensorKind::Custom(_) => SampleValue::scalar(rng.random::<f64>(), "raw"),
    }
}

/// Readings for every listed kind at one instant.
pub fn synthesize_readings(
    kinds: &[SensorKind],
    scooter_id: &ScooterId,
    pose: &Pose,
    prev: &Pose,
    noise: &Noise,
    ambient: &Ambient,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<SensorKind, SampleValue> {
    kinds
        .iter()
        .map(|k| (k.clone(), synthesize(k, scooter_id, pose, prev, noise, ambient, rng)))
        .collect()
}

/// Sensor source backed by the simulated vehicle.
pub struct SimSource {
    pub scooter_id: ScooterId,
    pub pose: Pose,
    pub prev: Pose,
    pub noise: Noise,
    pub ambient: Ambient,
    pub rng: ChaCha8Rng,
}

impl SensorSource for SimSource {
    fn read(&mut self, kind: &SensorKind, _now: Timestamp) -> Result<SampleValue, SourceError> {
        Ok(synthesize(
            kind,
            &self.scooter_id,
            &self.pose,
            &self.prev,
            &self.noise,
            &self.ambient,
            &mut self.rng,
        ))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::geo::EARTH_RADIUS_M;
    use crate::model::GeoPoint;
    use crate::sim::mobility::{Leg, Route};

    const T0: Timestamp = Timestamp(1_741_009_800_000);

    fn pose(t_ms: i64, lat: f64, speed: f64, heading: f64) -> Pose {
        Pose {
            position: GeoPoint::new(lat, -98.619).unwrap(),
            speed_mps: speed,
            heading_deg: heading,
            t: T0.plus_ms(t_ms),
        }
    }

    #[test]
    fn straight_cruise_reads_gravity_only() {
        let origin = GeoPoint::new(29.583, -98.619).unwrap();
        let to = destination(origin, 0.0, 1_000.0);
        let route = Route::plan(T0, origin, &[Leg { depart_s: 0.0, to, cruise_mps: 6.0 }]).unwrap();
        let quiet = Noise { gps_sigma_m: 0.0, imu_sigma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in (20_000..100_000).step_by(1_000) {
            let prev = route.pose_at(T0.plus_ms(t - 10));
            let now = route.pose_at(T0.plus_ms(t));
            let SampleValue::Vector3 { x, y, z, .. } =
                synthesize(&SensorKind::Accelerometer, &"s".into(), &now, &prev, &quiet, &Ambient::default(), &mut rng)
            else {
                panic!()
            };
            assert!(x.hypot(y) < 0.01, "{x} {y}");
            assert!((z - 9.81).abs() < 1e-12);
        }
    }

    #[test]
    fn quiet_gps_is_exact() {
        let p = pose(1_000, 29.583, 5.0, 90.0);
        let quiet = Noise { gps_sigma_m: 0.0, imu_sigma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = synthesize(&SensorKind::Gps, &"s".into(), &p, &p, &quiet, &Ambient::default(), &mut rng);
        assert_eq!(v.position(), Some(p.position));
    }

    #[test]
    fn gps_noise_has_configured_sigma() {
        let p = pose(1_000, 29.583, 5.0, 90.0);
        let noise = Noise { gps_sigma_m: 3.0, imu_sigma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m_per_deg = EARTH_RADIUS_M * PI / 180.0;
        let north: Vec<f64> = (0..10_000)
            .map(|_| {
                let fix = synthesize(&SensorKind::Gps, &"s".into(), &p, &p, &noise, &Ambient::default(), &mut rng);
                (fix.position().unwrap().lat() - p.position.lat()) * m_per_deg
            })
            .collect();
        let mean = north.iter().sum::<f64>() / north.len() as f64;
        let var = north.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (north.len() - 1) as f64;
        let sigma = var.sqrt();
        assert!((sigma - 3.0).abs() / 3.0 < 0.05, "sigma {sigma}");
    }

    #[test]
    fn environment_drifts_slowly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = pose(0, 29.583, 0.0, 0.0);
        let b = pose(60_000, 29.583, 0.0, 0.0);
        let read = |p: &Pose, rng: &mut ChaCha8Rng| match synthesize(
            &SensorKind::Temperature,
            &"s".into(),
            p,
            p,
            &Noise::default(),
            &Ambient::default(),
            rng,
        ) {
            SampleValue::Scalar { value, .. } => value,
            _ => unreachable!(),
        };
        let (ta, tb) = (read(&a, &mut rng), read(&b, &mut rng));
        assert!((ta - 29.0).abs() <= 0.5 && (tb - ta).abs() < 0.06);
    }
}
