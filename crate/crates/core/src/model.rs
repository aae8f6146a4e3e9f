//! Shared domain types and their canonical JSON forms.
//!
//! Every type here serializes to a stable JSON object: timestamps are integer
//! epoch milliseconds, coordinates are decimal degrees written with nine
//! fractional digits. The same bytes are used for chunk digests, outbox files
//! and the HTTP wire format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, TimeZone, Utc};
use serde::de::Error as _;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::policy::DataCollectionPolicy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("coordinate out of range: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("invalid custom sensor name {0:?}")]
    InvalidSensorName(String),
    #[error("unknown sensor kind {0:?}")]
    UnknownSensorKind(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("invalid chunk: {0}")]
    InvalidChunk(String),
    #[error("battery percentage {0} outside 0..=100")]
    InvalidBattery(f64),
}

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

id_type!(ScooterId);
id_type!(TripId);
id_type!(UserId);
id_type!(LoanId);
id_type!(ProjectId);

pub const SECOND_MS: i64 = 1_000;
pub const MINUTE_MS: i64 = 60 * SECOND_MS;
pub const HOUR_MS: i64 = 60 * MINUTE_MS;
pub const DAY_MS: i64 = 24 * HOUR_MS;

/// UTC instant with millisecond precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const fn from_millis(ms: i64) -> Self {
        Self(ms)
    }

    pub const fn millis(self) -> i64 {
        self.0
    }

    pub fn now() -> Self {
        Self(Utc::now().timestamp_millis())
    }

    pub const fn plus_ms(self, ms: i64) -> Self {
        Self(self.0 + ms)
    }

    pub fn seconds_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / 1000.0
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_millis_opt(self.0)
            .single()
            .unwrap_or(DateTime::<Utc>::UNIX_EPOCH)
    }

    pub fn from_datetime<Tz: TimeZone>(dt: &DateTime<Tz>) -> Self {
        Self(dt.timestamp_millis())
    }

    pub fn utc_date(self) -> NaiveDate {
        self.to_datetime().date_naive()
    }

    /// Start of the UTC hour containing this instant.
    pub fn hour_floor(self) -> Timestamp {
        Self(self.0.div_euclid(HOUR_MS) * HOUR_MS)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// WGS84 position. Coordinates are quantized to 1e-9 degrees so that the
/// nine-digit canonical form round-trips exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

const COORD_SCALE: f64 = 1e9;

fn quantize(v: f64) -> f64 {
    (v * COORD_SCALE).round() / COORD_SCALE
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, ModelError> {
        if !(lat.is_finite() && lon.is_finite())
            || !(-90.0..=90.0).contains(&lat)
            || !(-180.0..=180.0).contains(&lon)
        {
            return Err(ModelError::InvalidCoordinate { lat, lon });
        }
        Ok(Self {
            lat: quantize(lat),
            lon: quantize(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

struct Coord(f64);

impl Serialize for Coord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(format!("{:.9}", self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

impl Serialize for GeoPoint {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut st = serializer.serialize_struct("GeoPoint", 2)?;
        st.serialize_field("lat", &Coord(self.lat))?;
        st.serialize_field("lon", &Coord(self.lon))?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for GeoPoint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            lat: f64,
            lon: f64,
        }
        let raw = Raw::deserialize(deserializer)?;
        GeoPoint::new(raw.lat, raw.lon).map_err(D::Error::custom)
    }
}

/// Sensor channel. Custom kinds cover sensors added over GPIO/USB.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SensorKind {
    Gyroscope,
    Accelerometer,
    Magnetometer,
    Temperature,
    Pressure,
    Humidity,
    Light,
    Gps,
    Camera,
    Microphone,
    Custom(String),
}

impl SensorKind {
    pub const BUILTIN: [SensorKind; 10] = [
        SensorKind::Gyroscope,
        SensorKind::Accelerometer,
        SensorKind::Magnetometer,
        SensorKind::Temperature,
        SensorKind::Pressure,
        SensorKind::Humidity,
        SensorKind::Light,
        SensorKind::Gps,
        SensorKind::Camera,
        SensorKind::Microphone,
    ];

    pub fn custom(name: &str) -> Result<Self, ModelError> {
        let ok = !name.is_empty()
            && name
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
        if ok {
            Ok(SensorKind::Custom(name.to_owned()))
        } else {
            Err(ModelError::InvalidSensorName(name.to_owned()))
        }
    }

    pub fn is_imu(&self) -> bool {
        matches!(
            self,
            SensorKind::Gyroscope | SensorKind::Accelerometer | SensorKind::Magnetometer
        )
    }

    pub fn is_environmental(&self) -> bool {
        matches!(
            self,
            SensorKind::Temperature | SensorKind::Pressure | SensorKind::Humidity | SensorKind::Light
        )
    }

    pub fn is_blob(&self) -> bool {
        matches!(self, SensorKind::Camera | SensorKind::Microphone)
    }

    /// Highest sampling rate a policy may request for this kind.
    pub fn max_rate_hz(&self) -> f64 {
        match self {
            k if k.is_imu() => 100.0,
            SensorKind::Gps => 10.0,
            k if k.is_environmental() => 10.0,
            SensorKind::Camera => 2.0,
            SensorKind::Microphone => 1.0,
            _ => 100.0,
        }
    }

    /// Fixed unit for scalar kinds.
    pub fn scalar_unit(&self) -> Option<&'static str> {
        match self {
            SensorKind::Temperature => Some("degC"),
            SensorKind::Pressure => Some("hPa"),
            SensorKind::Humidity => Some("%RH"),
            SensorKind::Light => Some("lux"),
            _ => None,
        }
    }

    /// Fixed unit for vector kinds.
    pub fn vector_unit(&self) -> Option<&'static str> {
        match self {
            SensorKind::Accelerometer => Some("m/s^2"),
            SensorKind::Gyroscope => Some("rad/s"),
            SensorKind::Magnetometer => Some("uT"),
            _ => None,
        }
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SensorKind::Gyroscope => "gyroscope",
            SensorKind::Accelerometer => "accelerometer",
            SensorKind::Magnetometer => "magnetometer",
            SensorKind::Temperature => "temperature",
            SensorKind::Pressure => "pressure",
            SensorKind::Humidity => "humidity",
            SensorKind::Light => "light",
            SensorKind::Gps => "gps",
            SensorKind::Camera => "camera",
            SensorKind::Microphone => "microphone",
            SensorKind::Custom(name) => return write!(f, "custom:{name}"),
        };
        f.write_str(s)
    }
}

impl FromStr for SensorKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(name) = s.strip_prefix("custom:") {
            return SensorKind::custom(name);
        }
        SensorKind::BUILTIN
            .iter()
            .find(|k| k.to_string() == s)
            .cloned()
            .ok_or_else(|| ModelError::UnknownSensorKind(s.to_owned()))
    }
}

impl Serialize for SensorKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SensorKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SampleValue {
    Scalar {
        value: f64,
        unit: String,
    },
    Vector3 {
        x: f64,
        y: f64,
        z: f64,
        unit: String,
    },
    Fix {
        position: GeoPoint,
        speed_mps: f64,
        heading_deg: f64,
        hdop: f64,
    },
    /// Camera frame or audio segment; the payload travels separately.
    BlobRef { byte_len: u64, digest: String },
}

impl SampleValue {
    pub fn scalar(value: f64, unit: &str) -> Self {
        SampleValue::Scalar {
            value,
            unit: unit.to_owned(),
        }
    }

    pub fn vector3(v: [f64; 3], unit: &str) -> Self {
        SampleValue::Vector3 {
            x: v[0],
            y: v[1],
            z: v[2],
            unit: unit.to_owned(),
        }
    }

    pub fn position(&self) -> Option<GeoPoint> {
        match self {
            SampleValue::Fix { position, .. } => Some(*position),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSample {
    pub scooter_id: ScooterId,
    pub trip_id: TripId,
    pub kind: SensorKind,
    pub t: Timestamp,
    pub value: SampleValue,
}

impl SensorSample {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidSample(msg));
        if self.t.0 <= 0 {
            return bad(format!("non-positive timestamp {}", self.t));
        }
        match (&self.kind, &self.value) {
            (kind, SampleValue::Vector3 { x, y, z, unit }) => {
                if !(x.is_finite() && y.is_finite() && z.is_finite()) {
                    return bad("non-finite vector component".into());
                }
                match kind.vector_unit() {
                    Some(expected) if expected == unit => Ok(()),
                    Some(expected) => bad(format!("{kind} expects unit {expected}, got {unit}")),
                    None if matches!(kind, SensorKind::Custom(_)) => Ok(()),
                    None => bad(format!("vector3 value not allowed for {kind}")),
                }
            }
            (kind, SampleValue::Scalar { value, unit }) => {
                if !value.is_finite() {
                    return bad("non-finite scalar".into());
                }
                match kind.scalar_unit() {
                    Some(expected) if expected == unit => Ok(()),
                    Some(expected) => bad(format!("{kind} expects unit {expected}, got {unit}")),
                    None if matches!(kind, SensorKind::Custom(_)) => Ok(()),
                    None => bad(format!("scalar value not allowed for {kind}")),
                }
            }
            (SensorKind::Gps, SampleValue::Fix { speed_mps, heading_deg, hdop, .. }) => {
                if !(speed_mps.is_finite() && heading_deg.is_finite() && hdop.is_finite())
                    || *speed_mps < 0.0
                {
                    return bad("invalid fix fields".into());
                }
                Ok(())
            }
            (kind, SampleValue::Fix { .. }) => bad(format!("fix value not allowed for {kind}")),
            (SensorKind::Camera | SensorKind::Microphone, SampleValue::BlobRef { .. }) => Ok(()),
            (kind, SampleValue::BlobRef { .. }) => {
                bad(format!("blob_ref value not allowed for {kind}"))
            }
        }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("sample serialization is infallible")
    }

    /// Content hash used by census checks.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_bytes()).into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkKey {
    pub scooter_id: ScooterId,
    pub trip_id: TripId,
    pub seq: u32,
}

impl fmt::Display for ChunkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.scooter_id, self.trip_id, self.seq)
    }
}

/// Durable batch of samples, the unit of storage, upload and dedup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripChunk {
    pub chunk_key: ChunkKey,
    pub samples: Vec<SensorSample>,
    pub sealed_at: Timestamp,
    pub config_version: u64,
    pub digest: String,
}

/// Hex SHA-256 of the canonical serialized sample list.
pub fn samples_digest(samples: &[SensorSample]) -> String {
    let bytes = serde_json::to_vec(samples).expect("sample serialization is infallible");
    hex::encode(Sha256::digest(bytes))
}

impl TripChunk {
    pub fn seal(
        chunk_key: ChunkKey,
        samples: Vec<SensorSample>,
        sealed_at: Timestamp,
        config_version: u64,
    ) -> Self {
        let digest = samples_digest(&samples);
        Self {
            chunk_key,
            samples,
            sealed_at,
            config_version,
            digest,
        }
    }

    /// Checks key consistency, ordering, sample validity and the digest.
    pub fn verify(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidChunk(msg));
        let mut prev = None;
        for s in &self.samples {
            if s.scooter_id != self.chunk_key.scooter_id || s.trip_id != self.chunk_key.trip_id {
                return bad(format!("sample key mismatch in {}", self.chunk_key));
            }
            if let Some(p) = prev {
                if s.t < p {
                    return bad(format!("timestamps decrease in {}", self.chunk_key));
                }
            }
            prev = Some(s.t);
            s.validate()?;
        }
        if samples_digest(&self.samples) != self.digest {
            return bad(format!("digest does not match content of {}", self.chunk_key));
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("chunk serialization is infallible")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScooterStatus {
    Available,
    Loaned,
    Maintenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scooter {
    pub scooter_id: ScooterId,
    pub model: String,
    pub battery_pct: f64,
    pub odometer_m: f64,
    pub status: ScooterStatus,
    pub current_config_version: u64,
}

impl Scooter {
    pub fn new(scooter_id: ScooterId, model: &str, battery_pct: f64) -> Result<Self, ModelError> {
        if !(0.0..=100.0).contains(&battery_pct) {
            return Err(ModelError::InvalidBattery(battery_pct));
        }
        Ok(Self {
            scooter_id,
            model: model.to_owned(),
            battery_pct,
            odometer_m: 0.0,
            status: ScooterStatus::Available,
            current_config_version: 0,
        })
    }
}

/// Versioned configuration file deployed to one scooter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScooterConfig {
    pub scooter_id: ScooterId,
    pub version: u64,
    pub policy: DataCollectionPolicy,
    pub issued_at: Timestamp,
    pub project_id: Option<ProjectId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Admin,
    Researcher,
    Rider,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub user_id: UserId,
    pub role: Role,
    pub display_name: String,
    /// `salt$hex(sha256(salt || credential))`
    pub credential_digest: String,
}

pub const LOAN_PERIOD_MS: i64 = 14 * DAY_MS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loan {
    pub loan_id: LoanId,
    pub rider_id: UserId,
    pub scooter_id: ScooterId,
    pub started_at: Timestamp,
    pub due_at: Timestamp,
    pub returned_at: Option<Timestamp>,
    /// Start of the current loan period; set on renewal.
    #[serde(default)]
    pub renewed_at: Option<Timestamp>,
    pub consent_ack: bool,
    pub safety_video_ack: bool,
    pub survey_done: bool,
}

impl Loan {
    pub fn is_active(&self) -> bool {
        self.returned_at.is_none()
    }

    pub fn period_start(&self) -> Timestamp {
        self.renewed_at.unwrap_or(self.started_at)
    }

    /// Whether the loan covered instant `t`.
    pub fn covers(&self, t: Timestamp) -> bool {
        t >= self.started_at && self.returned_at.is_none_or(|r| t < r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectState {
    Draft,
    Active,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub project_id: ProjectId,
    pub owner: UserId,
    pub title: String,
    pub policy: DataCollectionPolicy,
    pub fleet: BTreeSet<ScooterId>,
    pub state: ProjectState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QualityFlag {
    GpsOutliersRemoved,
    DuplicatesRemoved,
    EmptyTrip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnrichmentSource {
    Weather,
    Traffic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnrichmentStatus {
    Attached,
    Pending,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PayloadValue {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridHour {
    pub cell: String,
    pub hour: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentRecord {
    pub source: EnrichmentSource,
    pub valid_for: GridHour,
    pub payload: BTreeMap<String, PayloadValue>,
    pub fetched_at: Timestamp,
    pub status: EnrichmentStatus,
}

/// An assembled and cleaned journey.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub trip_id: TripId,
    pub scooter_id: ScooterId,
    pub loan_id: Option<LoanId>,
    pub project_id: Option<ProjectId>,
    pub started_at: Timestamp,
    pub ended_at: Timestamp,
    pub samples: BTreeMap<SensorKind, Vec<SensorSample>>,
    pub distance_m: f64,
    pub enrichment: Vec<EnrichmentRecord>,
    pub quality_flags: BTreeSet<QualityFlag>,
}

impl Trip {
    pub fn gps_fixes(&self) -> impl Iterator<Item = GeoPoint> + '_ {
        self.samples
            .get(&SensorKind::Gps)
            .into_iter()
            .flatten()
            .filter_map(|s| s.value.position())
    }

    pub fn sample_counts(&self) -> BTreeMap<SensorKind, usize> {
        self.samples
            .iter()
            .map(|(k, v)| (k.clone(), v.len()))
            .collect()
    }

    pub fn sample_total(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    pub fn duration_s(&self) -> f64 {
        self.ended_at.seconds_since(self.started_at)
    }

    pub fn is_empty_trip(&self) -> bool {
        self.quality_flags.contains(&QualityFlag::EmptyTrip)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("trip serialization is infallible")
    }
}
