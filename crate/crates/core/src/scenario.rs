//! Timed disturbance and request scenarios.

use thiserror::Error;

/// Event payloads in file units (kW, kvar, V).
#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// New PCC import target.
    SetFlexibility { p_kw: f64 },
    /// Charger starts drawing; `p_kw` is an injection, so charging is negative.
    EvChargeStart { target: String, p_kw: f64 },
    EvChargeStop { target: String },
    SlackVoltageChange { v_v: f64 },
    LoadChange { target: String, p_kw: f64, q_kvar: f64 },
}

impl EventKind {
    pub fn keyword(&self) -> &'static str {
        match self {
            EventKind::SetFlexibility { .. } => "set_flexibility",
            EventKind::EvChargeStart { .. } => "ev_charge_start",
            EventKind::EvChargeStop { .. } => "ev_charge_stop",
            EventKind::SlackVoltageChange { .. } => "slack_voltage_change",
            EventKind::LoadChange { .. } => "load_change",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEvent {
    pub time_s: f64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub duration_s: f64,
    pub sample_s: f64,
    /// Initial slack voltage; `None` = nominal.
    pub slack_v_v: Option<f64>,
    pub events: Vec<ScenarioEvent>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("negative event time")]
    NegativeTime,
    #[error("events not sorted by time (event {index})")]
    Unsorted { index: usize },
    #[error("non-positive {0}")]
    NonPositive(&'static str),
    #[error("non-finite value in event {0}")]
    NonFinite(usize),
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.sample_s > 0.0 && self.sample_s.is_finite()) {
            return Err(ScenarioError::NonPositive("sampling interval"));
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(ScenarioError::NonPositive("duration"));
        }
        if let Some(v) = self.slack_v_v {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ScenarioError::NonPositive("slack voltage"));
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            if !e.time_s.is_finite() {
                return Err(ScenarioError::NonFinite(i));
            }
            if e.time_s < 0.0 {
                return Err(ScenarioError::NegativeTime);
            }
            if i > 0 && e.time_s < self.events[i - 1].time_s {
                return Err(ScenarioError::Unsorted { index: i });
            }
            let finite = match &e.kind {
                EventKind::SetFlexibility { p_kw } => p_kw.is_finite(),
                EventKind::EvChargeStart { p_kw, .. } => p_kw.is_finite(),
                EventKind::EvChargeStop { .. } => true,
                EventKind::SlackVoltageChange { v_v } => v_v.is_finite(),
                EventKind::LoadChange { p_kw, q_kvar, .. } => p_kw.is_finite() && q_kvar.is_finite(),
            };
            if !finite {
                return Err(ScenarioError::NonFinite(i));
            }
        }
        Ok(())
    }

    /// Number of samples, including the one at t = 0.
    pub fn sample_count(&self) -> usize {
        (self.duration_s / self.sample_s + 1e-9).floor() as usize + 1
    }

    pub fn sample_time(&self, k: usize) -> f64 {
        k as f64 * self.sample_s
    }

    /// Events due at sample `k`: time in `(t_{k-1}, t_k]`, with everything
    /// up to `t_0` due at the first sample.
    pub fn due(&self, k: usize) -> &[ScenarioEvent] {
        let t = self.sample_time(k);
        let t_prev = if k == 0 { f64::NEG_INFINITY } else { self.sample_time(k - 1) };
        schedule(&self.events, t_prev, t)
    }
}

/// Events with `t_prev < time ≤ t`, in file order. `events` must be sorted.
pub fn schedule(events: &[ScenarioEvent], t_prev: f64, t: f64) -> &[ScenarioEvent] {
    let start = events.partition_point(|e| e.time_s <= t_prev);
    let end = events.partition_point(|e| e.time_s <= t);
    &events[start..end.max(start)]
}
