//! Data collection policies: which sensors run at what rate, where, and when.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{FenceError, GeoFence, GeoFenceSpec};
use crate::model::SensorKind;
use crate::schedule::{Schedule, ScheduleError, ScheduleSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyViolation {
    #[error("{kind} rate {rate_hz} Hz exceeds cap of {max_hz} Hz")]
    RateExceedsCap {
        kind: SensorKind,
        rate_hz: f64,
        max_hz: f64,
    },
    #[error("{kind} rate {rate_hz} Hz must be positive and finite")]
    NonPositiveRate { kind: SensorKind, rate_hz: f64 },
    #[error("no sensors enabled")]
    EmptySensorSet,
    #[error("invalid fence: {0}")]
    InvalidFence(FenceError),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(ScheduleError),
}

impl PolicyViolation {
    pub fn code(&self) -> &'static str {
        match self {
            PolicyViolation::RateExceedsCap { .. } => "RateExceedsCap",
            PolicyViolation::NonPositiveRate { .. } => "NonPositiveRate",
            PolicyViolation::EmptySensorSet => "EmptySensorSet",
            PolicyViolation::InvalidFence(_) => "InvalidFence",
            PolicyViolation::InvalidSchedule(_) => "InvalidSchedule",
        }
    }
}

/// A policy as submitted, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDraft {
    pub sensors: BTreeMap<SensorKind, f64>,
    #[serde(default)]
    pub fence: Option<GeoFenceSpec>,
    pub schedule: ScheduleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyDraft", into = "PolicyDraft")]
pub struct DataCollectionPolicy {
    sensors: BTreeMap<SensorKind, f64>,
    fence: Option<GeoFence>,
    schedule: Schedule,
}

/// Validates every rule and reports all violations at once.
pub fn validate_policy(draft: &PolicyDraft) -> Result<DataCollectionPolicy, Vec<PolicyViolation>> {
    let mut violations = Vec::new();
    if draft.sensors.is_empty() {
        violations.push(PolicyViolation::EmptySensorSet);
    }
    for (kind, &rate_hz) in &draft.sensors {
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            violations.push(PolicyViolation::NonPositiveRate {
                kind: kind.clone(),
                rate_hz,
            });
        } else if rate_hz > kind.max_rate_hz() {
            violations.push(PolicyViolation::RateExceedsCap {
                kind: kind.clone(),
                rate_hz,
                max_hz: kind.max_rate_hz(),
            });
        }
    }
    let fence = match draft.fence.clone().map(GeoFence::try_from).transpose() {
        Ok(f) => f,
        Err(e) => {
            violations.push(PolicyViolation::InvalidFence(e));
            None
        }
    };
    let schedule = match Schedule::validate(&draft.schedule) {
        Ok(s) => Some(s),
        Err(errs) => {
            violations.extend(errs.into_iter().map(PolicyViolation::InvalidSchedule));
            None
        }
    };
    match schedule {
        Some(schedule) if violations.is_empty() => Ok(DataCollectionPolicy {
            sensors: draft.sensors.clone(),
            fence,
            schedule,
        }),
        _ => Err(violations),
    }
}

impl TryFrom<PolicyDraft> for DataCollectionPolicy {
    type Error = String;

    fn try_from(draft: PolicyDraft) -> Result<Self, Self::Error> {
        validate_policy(&draft).map_err(|v| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ")
        })
    }
}

impl From<DataCollectionPolicy> for PolicyDraft {
    fn from(p: DataCollectionPolicy) -> Self {
        PolicyDraft {
            sensors: p.sensors,
            fence: p.fence.map(GeoFenceSpec::from),
            schedule: p.schedule.into(),
        }
    }
}

impl DataCollectionPolicy {
    pub fn new(
        sensors: BTreeMap<SensorKind, f64>,
        fence: Option<GeoFence>,
        schedule: Schedule,
    ) -> Result<Self, Vec<PolicyViolation>> {
        validate_policy(&PolicyDraft {
            sensors,
            fence: fence.map(GeoFenceSpec::from),
            schedule: schedule.into(),
        })
    }

    /// Unfenced, unrestricted policy over the given rates.
    pub fn simple<I>(rates: I) -> Result<Self, Vec<PolicyViolation>>
    where
        I: IntoIterator<Item = (SensorKind, f64)>,
    {
        Self::new(rates.into_iter().collect(), None, Schedule::always())
    }

    pub fn sensors(&self) -> &BTreeMap<SensorKind, f64> {
        &self.sensors
    }

    pub fn rate_hz(&self, kind: &SensorKind) -> Option<f64> {
        self.sensors.get(kind).copied()
    }

    pub fn fence(&self) -> Option<&GeoFence> {
        self.fence.as_ref()
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn is_gated(&self) -> bool {
        self.fence.is_some() || self.schedule.has_windows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draft(sensors: &[(SensorKind, f64)]) -> PolicyDraft {
        PolicyDraft {
            sensors: sensors.iter().cloned().collect(),
            fence: None,
            schedule: Schedule::always().into(),
        }
    }

    #[test]
    fn one_hz_gps_is_valid() {
        let p = validate_policy(&draft(&[(SensorKind::Gps, 1.0)])).unwrap();
        assert_eq!(p.rate_hz(&SensorKind::Gps), Some(1.0));
        assert!(!p.is_gated());
    }

    #[test]
    fn gps_over_cap_is_rejected() {
        let errs = validate_policy(&draft(&[(SensorKind::Gps, 50.0)])).unwrap_err();
        assert_eq!(
            errs,
            vec![PolicyViolation::RateExceedsCap {
                kind: SensorKind::Gps,
                rate_hz: 50.0,
                max_hz: 10.0
            }]
        );
    }

    #[test]
    fn empty_sensor_set_is_rejected() {
        assert_eq!(
            validate_policy(&draft(&[])).unwrap_err(),
            vec![PolicyViolation::EmptySensorSet]
        );
    }

    #[test]
    fn all_violations_are_reported() {
        let mut d = draft(&[
            (SensorKind::Camera, 5.0),
            (SensorKind::Microphone, 2.0),
            (SensorKind::Accelerometer, -1.0),
        ]);
        d.fence = Some(GeoFenceSpec { rings: vec![] });
        d.schedule.active_until = chrono::NaiveDate::from_ymd_opt(1999, 1, 1).unwrap();
        let codes: Vec<_> = validate_policy(&d)
            .unwrap_err()
            .iter()
            .map(PolicyViolation::code)
            .collect();
        assert_eq!(
            codes,
            vec!["NonPositiveRate", "RateExceedsCap", "RateExceedsCap", "InvalidFence", "InvalidSchedule"]
        );
    }

    #[test]
    fn caps_per_kind() {
        assert!(validate_policy(&draft(&[(SensorKind::Accelerometer, 100.0)])).is_ok());
        assert!(validate_policy(&draft(&[(SensorKind::Gyroscope, 100.5)])).is_err());
        assert!(validate_policy(&draft(&[(SensorKind::Humidity, 10.0)])).is_ok());
        assert!(validate_policy(&draft(&[(SensorKind::Camera, 2.0)])).is_ok());
        assert!(validate_policy(&draft(&[(SensorKind::Microphone, 1.0)])).is_ok());
    }

    #[test]
    fn deserializing_validates() {
        let ok = r#"{"sensors":{"gps":1.0},"schedule":{"active_from":"2025-01-01","active_until":"2025-12-31"}}"#;
        let p: DataCollectionPolicy = serde_json::from_str(ok).unwrap();
        assert_eq!(p.sensors().len(), 1);
        let bad = ok.replace("1.0", "50.0");
        assert!(serde_json::from_str::<DataCollectionPolicy>(&bad).is_err());
    }
}
