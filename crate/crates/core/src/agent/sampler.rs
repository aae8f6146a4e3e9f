//! Per-kind phase accumulators that turn a tick stream into sample emissions.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{SampleValue, SensorKind, Timestamp};
use crate::policy::DataCollectionPolicy;

const EMIT_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("sensor {kind} unavailable: {reason}")]
pub struct SourceError {
    pub kind: SensorKind,
    pub reason: String,
}

/// Provides the current raw reading for a sensor kind.
pub trait SensorSource {
    fn read(&mut self, kind: &SensorKind, now: Timestamp) -> Result<SampleValue, SourceError>;
}

#[derive(Debug, Clone, Default)]
pub struct Sampler {
    phase: BTreeMap<SensorKind, f64>,
    last_tick: Option<Timestamp>,
}

impl Sampler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forgets all phase; the next tick emits every enabled kind.
    pub fn reset(&mut self) {
        self.phase.clear();
        self.last_tick = None;
    }

    /// Kinds due at `now`, GPS first so that gating sees the fresh fix.
    pub fn due(&mut self, now: Timestamp, policy: &DataCollectionPolicy) -> Vec<SensorKind> {
        let dt_s = match self.last_tick {
            Some(prev) if now > prev => now.seconds_since(prev),
            Some(_) => 0.0,
            None => f64::INFINITY,
        };
        self.last_tick = Some(now);
        let mut due = Vec::new();
        for (kind, &rate_hz) in policy.sensors() {
            let acc = self.phase.entry(kind.clone()).or_insert(0.0);
            *acc = if dt_s.is_infinite() { 1.0 } else { *acc + dt_s * rate_hz };
            if *acc >= 1.0 - EMIT_EPSILON {
                *acc -= 1.0;
                // missed periods are dropped rather than burst-emitted
                if *acc >= 1.0 - EMIT_EPSILON {
                    *acc = acc.fract();
                }
                due.push(kind.clone());
            }
        }
        if let Some(i) = due.iter().position(|k| *k == SensorKind::Gps) {
            let gps = due.remove(i);
            due.insert(0, gps);
        }
        due
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(rate: f64, kind: SensorKind, dur_ms: i64, step_ms: i64) -> usize {
        let policy = DataCollectionPolicy::simple([(kind, rate)]).unwrap();
        let mut s = Sampler::new();
        (0..dur_ms)
            .step_by(step_ms as usize)
            .map(|t| s.due(Timestamp(1 + t), &policy).len())
            .sum()
    }

    #[test]
    fn fifty_hz_over_one_second_of_millisecond_ticks() {
        assert_eq!(count(50.0, SensorKind::Accelerometer, 1_000, 1), 50);
    }

    #[test]
    fn one_hz_gps_over_two_minutes() {
        assert_eq!(count(1.0, SensorKind::Gps, 120_000, 10), 120);
    }

    #[test]
    fn hundred_hz_on_ten_ms_ticks_is_exact() {
        assert_eq!(count(100.0, SensorKind::Gyroscope, 10_000, 10), 1_000);
    }

    #[test]
    fn awkward_rates_stay_within_one() {
        for rate in [3.0, 7.0, 0.3, 33.0, 2.0 / 3.0] {
            let n = count(rate, SensorKind::Accelerometer, 60_000, 10);
            let expected = rate * 60.0;
            assert!((n as f64 - expected).abs() <= 1.0, "rate {rate}: {n} vs {expected}");
        }
    }

    #[test]
    fn gps_sorted_first() {
        let policy = DataCollectionPolicy::simple([
            (SensorKind::Accelerometer, 10.0),
            (SensorKind::Gps, 1.0),
            (SensorKind::Temperature, 1.0),
        ])
        .unwrap();
        let mut s = Sampler::new();
        assert_eq!(s.due(Timestamp(1), &policy)[0], SensorKind::Gps);
    }
}
