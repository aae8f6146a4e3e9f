//! Request and response bodies shared by the node uplink and the HTTP APIs.

use serde::{Deserialize, Serialize};

use crate::model::{ChunkKey, ScooterId, SensorSample, TripId};

/// Range of a fully charged scooter in miles.
pub const RATED_RANGE_MILES: f64 = 40.0;
/// Rated range in meters (40 mi).
pub const RATED_RANGE_M: f64 = 64_374.0;

/// Linear range estimate over the rated range.
pub fn estimated_range_miles(battery_pct: f64) -> f64 {
    RATED_RANGE_MILES * battery_pct.clamp(0.0, 100.0) / 100.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkAck {
    pub chunk_key: ChunkKey,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalizeRequest {
    pub chunk_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "missing", rename_all = "snake_case")]
pub enum FinalizeOutcome {
    Complete,
    AwaitingChunks(Vec<u32>),
}

/// Vehicle state piggybacked on config polls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub battery_pct: f64,
    pub odometer_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryStatus {
    pub battery_pct: f64,
    pub est_range_miles: f64,
}

impl BatteryStatus {
    pub fn from_pct(battery_pct: f64) -> Self {
        Self {
            battery_pct,
            est_range_miles: estimated_range_miles(battery_pct),
        }
    }
}

/// Battery entry as listed by the portal; `None` values mean no heartbeat yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryLevel {
    pub scooter_id: ScooterId,
    pub battery_pct: Option<f64>,
    pub est_range_miles: Option<f64>,
    pub status: BatteryReading,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatteryReading {
    Reported,
    Unknown,
}

/// Order-independent multiset summary of samples: a count plus the wrapping
/// sum of each sample digest's leading 16 bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub samples: u64,
    #[serde(with = "hex_u128")]
    pub fingerprint: u128,
}

impl Census {
    pub fn add(&mut self, sample: &SensorSample) {
        let digest = sample.digest();
        let mut head = [0u8; 16];
        head.copy_from_slice(&digest[..16]);
        self.samples += 1;
        self.fingerprint = self.fingerprint.wrapping_add(u128::from_le_bytes(head));
    }

    pub fn merge(&mut self, other: Census) {
        self.samples += other.samples;
        self.fingerprint = self.fingerprint.wrapping_add(other.fingerprint);
    }

    pub fn of<'a>(samples: impl IntoIterator<Item = &'a SensorSample>) -> Self {
        let mut c = Census::default();
        for s in samples {
            c.add(s);
        }
        c
    }
}

mod hex_u128 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:032x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        u128::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

/// Trips whose stored chunks a census request covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusRequest {
    pub trips: Vec<(ScooterId, TripId)>,
}

/// Error body returned by every HTTP endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl ApiError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            details: serde_json::Value::Null,
        }
    }

    pub fn with_details(mut self, details: serde_json::Value) -> Self {
        self.details = details;
        self
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_is_linear_in_charge() {
        assert_eq!(estimated_range_miles(100.0), 40.0);
        assert_eq!(estimated_range_miles(0.0), 0.0);
        assert_eq!(estimated_range_miles(75.0), 30.0);
    }

    #[test]
    fn finalize_outcome_wire_form() {
        let json = serde_json::to_string(&FinalizeOutcome::AwaitingChunks(vec![1])).unwrap();
        assert_eq!(json, r#"{"outcome":"awaiting_chunks","missing":[1]}"#);
        let json = serde_json::to_string(&FinalizeOutcome::Complete).unwrap();
        assert_eq!(json, r#"{"outcome":"complete"}"#);
    }
}
