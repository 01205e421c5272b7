//! Disturbance schedule.

use serde::{Deserialize, Serialize};

use crate::netmodel::BusId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventAction {
    /// Connects the EV station at `bus` (host or spur leaf).
    SwitchInEv { bus: BusId },
    SwitchOutEv { bus: BusId },
    /// Adds constant-power demand at `bus`.
    LoadStep { bus: BusId, dp_mw: f64, dq_mvar: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time_s: f64,
    pub actions: Vec<EventAction>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<Event>", into = "Vec<Event>")]
pub struct EventSchedule {
    events: Vec<Event>,
}

impl EventSchedule {
    /// Times must be finite, non-negative and strictly increasing.
    pub fn new(events: Vec<Event>) -> Result<Self, String> {
        let mut last = f64::NEG_INFINITY;
        for e in &events {
            if !(e.time_s.is_finite() && e.time_s >= 0.0) {
                return Err(format!("invalid event time {}", e.time_s));
            }
            if e.time_s <= last {
                return Err(format!("event times must be strictly increasing ({} after {})", e.time_s, last));
            }
            last = e.time_s;
        }
        Ok(Self { events })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn last_time(&self) -> Option<f64> {
        self.events.last().map(|e| e.time_s)
    }
}

impl TryFrom<Vec<Event>> for EventSchedule {
    type Error = String;
    fn try_from(v: Vec<Event>) -> Result<Self, String> {
        Self::new(v)
    }
}

impl From<EventSchedule> for Vec<Event> {
    fn from(s: EventSchedule) -> Self {
        s.events
    }
}
