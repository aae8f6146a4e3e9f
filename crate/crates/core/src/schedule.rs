//! Project schedules: an active date range plus optional weekly windows.

use chrono::{Datelike, NaiveDate, NaiveTime, Weekday};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Timestamp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("unknown timezone {0:?}")]
    UnknownTimezone(String),
    #[error("window {index}: start {start} is not before end {end}")]
    EmptyWindow {
        index: usize,
        start: NaiveTime,
        end: NaiveTime,
    },
    #[error("window {0} has no days of week")]
    NoDays(usize),
    #[error("active_from {from} is after active_until {until}")]
    InvertedRange { from: NaiveDate, until: NaiveDate },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleWindowSpec {
    pub days: Vec<Weekday>,
    pub start: NaiveTime,
    pub end: NaiveTime,
    pub tz: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub active_from: NaiveDate,
    pub active_until: NaiveDate,
    #[serde(default)]
    pub windows: Vec<ScheduleWindowSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleWindow {
    days: Vec<Weekday>,
    start: NaiveTime,
    end: NaiveTime,
    tz: Tz,
}

impl ScheduleWindow {
    fn contains(&self, t: Timestamp) -> bool {
        let local = t.to_datetime().with_timezone(&self.tz);
        let time = local.time();
        self.days.contains(&local.weekday()) && time >= self.start && time < self.end
    }
}

/// Validated schedule. Timezones are resolved at construction so queries
/// never fail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct Schedule {
    active_from: NaiveDate,
    active_until: NaiveDate,
    windows: Vec<ScheduleWindow>,
}

impl TryFrom<ScheduleSpec> for Schedule {
    type Error = ScheduleError;

    fn try_from(spec: ScheduleSpec) -> Result<Self, Self::Error> {
        Schedule::new(spec)
    }
}

impl From<Schedule> for ScheduleSpec {
    fn from(s: Schedule) -> Self {
        ScheduleSpec {
            active_from: s.active_from,
            active_until: s.active_until,
            windows: s
                .windows
                .into_iter()
                .map(|w| ScheduleWindowSpec {
                    days: w.days,
                    start: w.start,
                    end: w.end,
                    tz: w.tz.name().to_owned(),
                })
                .collect(),
        }
    }
}

impl Schedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self, ScheduleError> {
        Self::validate(&spec).map_err(|mut errs| errs.remove(0))
    }

    /// Every violation in `spec`, or the validated schedule.
    pub fn validate(spec: &ScheduleSpec) -> Result<Self, Vec<ScheduleError>> {
        let mut errors = Vec::new();
        if spec.active_from > spec.active_until {
            errors.push(ScheduleError::InvertedRange {
                from: spec.active_from,
                until: spec.active_until,
            });
        }
        let mut windows = Vec::with_capacity(spec.windows.len());
        for (index, w) in spec.windows.iter().enumerate() {
            if w.start >= w.end {
                errors.push(ScheduleError::EmptyWindow {
                    index,
                    start: w.start,
                    end: w.end,
                });
            }
            if w.days.is_empty() {
                errors.push(ScheduleError::NoDays(index));
            }
            match w.tz.parse::<Tz>() {
                Ok(tz) => windows.push(ScheduleWindow {
                    days: w.days.clone(),
                    start: w.start,
                    end: w.end,
                    tz,
                }),
                Err(_) => errors.push(ScheduleError::UnknownTimezone(w.tz.clone())),
            }
        }
        if errors.is_empty() {
            Ok(Schedule {
                active_from: spec.active_from,
                active_until: spec.active_until,
                windows,
            })
        } else {
            Err(errors)
        }
    }

    /// No weekly restriction within the date range.
    pub fn unrestricted(active_from: NaiveDate, active_until: NaiveDate) -> Result<Self, ScheduleError> {
        Schedule::new(ScheduleSpec {
            active_from,
            active_until,
            windows: Vec::new(),
        })
    }

    /// Unrestricted over 2000-01-01..=2099-12-31.
    pub fn always() -> Self {
        Schedule::unrestricted(
            NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            NaiveDate::from_ymd_opt(2099, 12, 31).expect("valid date"),
        )
        .expect("valid range")
    }

    pub fn active_from(&self) -> NaiveDate {
        self.active_from
    }

    pub fn active_until(&self) -> NaiveDate {
        self.active_until
    }

    pub fn has_windows(&self) -> bool {
        !self.windows.is_empty()
    }
}

/// Date range check on the UTC date, then any window in its own timezone,
/// half-open in local time.
pub fn schedule_contains(schedule: &Schedule, t: Timestamp) -> bool {
    let date = t.utc_date();
    if date < schedule.active_from || date > schedule.active_until {
        return false;
    }
    schedule.windows.is_empty() || schedule.windows.iter().any(|w| w.contains(t))
}
