//! Trip segmentation from recent speed estimates.

use std::collections::VecDeque;

use crate::model::{Timestamp, TripId};

/// Speed above which the scooter counts as moving, m/s.
pub const MOVING_SPEED_MPS: f64 = 0.5;
/// Sustained motion needed to open a trip.
pub const START_AFTER_MS: i64 = 3_000;
/// Sustained stillness needed to close a trip.
pub const STOP_AFTER_MS: i64 = 120_000;
const WINDOW_RETAIN_MS: i64 = STOP_AFTER_MS + 10_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RideState {
    Idle,
    Recording(TripId),
    /// Trip closed at `ended_at`; the final chunk is being sealed.
    Draining { trip_id: TripId, ended_at: Timestamp },
}

/// Time-ordered speed estimates covering at least the last two minutes.
#[derive(Debug, Clone, Default)]
pub struct SpeedWindow {
    samples: VecDeque<(Timestamp, f64)>,
}

impl SpeedWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Timestamp, speed_mps: f64) {
        self.samples.push_back((t, speed_mps));
        while let Some(&(oldest, _)) = self.samples.front() {
            if t.millis() - oldest.millis() > WINDOW_RETAIN_MS {
                self.samples.pop_front();
            } else {
                break;
            }
        }
    }

    /// Whether every estimate in `[now - span, now]` satisfies `pred` and the
    /// window actually reaches back that far.
    fn sustained(&self, now: Timestamp, span_ms: i64, pred: impl Fn(f64) -> bool) -> bool {
        let from = now.millis() - span_ms;
        match self.samples.front() {
            Some(&(oldest, _)) if oldest.millis() <= from => {}
            _ => return false,
        }
        self.samples
            .iter()
            .rev()
            .take_while(|(t, _)| t.millis() >= from)
            .all(|&(_, v)| pred(v))
    }

    /// Start of the trailing run of stationary estimates.
    fn stationary_since(&self) -> Option<Timestamp> {
        self.samples
            .iter()
            .rev()
            .take_while(|(_, v)| *v <= MOVING_SPEED_MPS)
            .last()
            .map(|(t, _)| *t)
    }
}

/// Next ride state. `mint` is only called when a new trip opens.
pub fn motion_transition(
    state: &RideState,
    window: &SpeedWindow,
    now: Timestamp,
    mint: impl FnOnce() -> TripId,
) -> RideState {
    match state {
        RideState::Idle => {
            if window.sustained(now, START_AFTER_MS, |v| v > MOVING_SPEED_MPS) {
                RideState::Recording(mint())
            } else {
                RideState::Idle
            }
        }
        RideState::Recording(trip_id) => {
            if window.sustained(now, STOP_AFTER_MS, |v| v <= MOVING_SPEED_MPS) {
                RideState::Draining {
                    trip_id: trip_id.clone(),
                    ended_at: window.stationary_since().unwrap_or(now),
                }
            } else {
                state.clone()
            }
        }
        RideState::Draining { .. } => state.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feed(window: &mut SpeedWindow, from_ms: i64, to_ms: i64, speed: f64) {
        let mut t = from_ms;
        while t <= to_ms {
            window.push(Timestamp(t), speed);
            t += 100;
        }
    }

    #[test]
    fn three_seconds_of_motion_opens_a_trip() {
        let mut w = SpeedWindow::new();
        feed(&mut w, 0, 2_900, 1.2);
        let s = motion_transition(&RideState::Idle, &w, Timestamp(2_900), || "t1".into());
        assert_eq!(s, RideState::Idle);
        feed(&mut w, 3_000, 3_000, 1.2);
        let s = motion_transition(&RideState::Idle, &w, Timestamp(3_000), || "t1".into());
        assert_eq!(s, RideState::Recording("t1".into()));
    }

    #[test]
    fn short_pause_keeps_the_trip() {
        let mut w = SpeedWindow::new();
        let rec = RideState::Recording("t1".into());
        feed(&mut w, 0, 60_000, 3.0);
        feed(&mut w, 60_100, 70_000, 0.0);
        feed(&mut w, 70_100, 80_000, 3.0);
        for t in (0..=80_000).step_by(100) {
            let s = motion_transition(&rec, &w, Timestamp(t), || unreachable!());
            assert_eq!(s, rec);
        }
    }

    #[test]
    fn two_minutes_still_closes_and_backdates() {
        let mut w = SpeedWindow::new();
        let rec = RideState::Recording("t1".into());
        feed(&mut w, 0, 60_000, 3.0);
        feed(&mut w, 60_100, 180_000, 0.0);
        assert_eq!(
            motion_transition(&rec, &w, Timestamp(180_000), || unreachable!()),
            rec
        );
        feed(&mut w, 180_100, 180_100, 0.0);
        assert_eq!(
            motion_transition(&rec, &w, Timestamp(180_100), || unreachable!()),
            RideState::Draining {
                trip_id: "t1".into(),
                ended_at: Timestamp(60_100)
            }
        );
    }

    #[test]
    fn empty_window_never_transitions() {
        let w = SpeedWindow::new();
        assert_eq!(
            motion_transition(&RideState::Idle, &w, Timestamp(10_000), || "x".into()),
            RideState::Idle
        );
    }
}
