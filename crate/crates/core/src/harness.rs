//! Closed-loop runs of the controller against the plant, telemetry and
//! KPI extraction.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{self, Write};

use thiserror::Error;

use crate::controller::{ControllerConfig, ControllerError, Measurement, OfoController, StepRecord};
use crate::network::{DeviceSet, Exogenous, NetworkModel, PerUnitBase};
use crate::plant::{Plant, PlantConfig, PlantError, PlantSample};
use crate::scenario::{EventKind, Scenario, ScenarioError};
use crate::sensitivity::{compute_sensitivity_with, SensitivityError, SensitivityOptions};
use crate::setpoint::SetpointVector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("plant: {0}")]
    Plant(#[from] PlantError),
    #[error("controller: {0}")]
    Controller(#[from] ControllerError),
    #[error("sensitivity: {0}")]
    Sensitivity(#[from] SensitivityError),
}

/// Initial slack voltage of `scenario` in p.u.
pub fn initial_slack(net: &NetworkModel, scenario: &Scenario) -> f64 {
    scenario
        .slack_v_v
        .map(|v| net.voltage_to_pu(0, v))
        .unwrap_or(1.0)
}

/// Default controller configuration with the sensitivity linearized at
/// `u0` under the nominal exogenous state and the given slack voltage.
pub fn controller_config(
    net: &NetworkModel,
    devices: &DeviceSet,
    u0: &SetpointVector,
    slack_v: f64,
) -> Result<ControllerConfig, HarnessError> {
    let opts = SensitivityOptions {
        slack_v,
        ..SensitivityOptions::default()
    };
    let sens = compute_sensitivity_with(net, devices, u0, &opts)?;
    Ok(ControllerConfig::new(net, devices, sens))
}

/// One sample of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub iteration: usize,
    pub time_s: f64,
    pub p_set: f64,
    /// Noise-free grid outputs (after actuation when the delay is zero).
    pub measured: Measurement,
    /// Setpoints realized by the devices at this sample.
    pub applied: SetpointVector,
    /// Controller output issued at this sample.
    pub command: SetpointVector,
    pub record: StepRecord,
    /// Disturbance state at this sample.
    pub exogenous: Exogenous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryLog {
    pub scenario: String,
    pub seed: u64,
    pub config_hash: u64,
    pub sample_s: f64,
    pub base: PerUnitBase,
    pub bus_ids: Vec<u32>,
    pub bus_voltage_base: Vec<f64>,
    pub units: Vec<String>,
    pub legacy: Vec<String>,
    pub chargers: Vec<String>,
    /// Sample indices of scenario events: `(index, is_flexibility_request)`.
    pub events: Vec<(usize, bool)>,
    pub rows: Vec<TelemetryRow>,
    /// Set when the plant failed and the log was truncated.
    pub abort: Option<String>,
}

fn hash_config(ctrl: &ControllerConfig, plant: &PlantConfig, scenario: &Scenario) -> u64 {
    let mut h = DefaultHasher::new();
    format!("{ctrl:?}|{plant:?}|{scenario:?}").hash(&mut h);
    h.finish()
}

/// Runs `scenario` from setpoints `u0`.
///
/// Before the first request the controller holds the initial PCC import.
/// A plant failure truncates the log and records the reason; controller
/// alarms are logged and the run continues.
pub fn run_closed_loop(
    net: &NetworkModel,
    devices: &DeviceSet,
    scenario: &Scenario,
    ctrl_cfg: &ControllerConfig,
    plant_cfg: &PlantConfig,
    u0: &SetpointVector,
) -> Result<TelemetryLog, HarnessError> {
    scenario.validate()?;
    let slack_v = initial_slack(net, scenario);
    let mut plant = Plant::new(net, devices, u0.clone(), slack_v, plant_cfg.clone())?;
    plant.check_scenario(scenario)?;

    let mut ctrl = OfoController::new(ctrl_cfg.clone(), plant.state().applied.clone())?;
    let baseline = Plant::new(net, devices, u0.clone(), slack_v, plant_cfg.clone())?
        .step(&Scenario { events: vec![], ..scenario.clone() }, 0)?;
    ctrl.set_flexibility_request(net.base().kw_from_pu(baseline.truth.pcc_p));

    let mut events: Vec<(usize, bool)> = Vec::new();
    let mut log = TelemetryLog {
        scenario: scenario.name.clone(),
        seed: plant_cfg.seed,
        config_hash: hash_config(ctrl_cfg, plant_cfg, scenario),
        sample_s: scenario.sample_s,
        base: net.base(),
        bus_ids: net.buses().iter().map(|b| b.id).collect(),
        bus_voltage_base: (0..net.bus_count()).map(|i| net.voltage_from_pu(i, 1.0)).collect(),
        units: devices.controllables.iter().map(|f| f.name.clone()).collect(),
        legacy: devices.legacy.iter().map(|d| d.name.clone()).collect(),
        chargers: devices.ev_points.iter().map(|e| e.name.clone()).collect(),
        events: Vec::new(),
        rows: Vec::with_capacity(scenario.sample_count()),
        abort: None,
    };

    for k in 0..scenario.sample_count() {
        for e in scenario.due(k) {
            events.push((k, matches!(e.kind, EventKind::SetFlexibility { .. })));
        }
        let sample = match plant.step(scenario, k) {
            Ok(s) => s,
            Err(e) => {
                log.abort = Some(e.to_string());
                break;
            }
        };
        for &p_kw in &sample.requests {
            ctrl.set_flexibility_request(p_kw);
        }
        let applied_before = plant.state().applied.clone();
        let record = ctrl.step(&sample.delivered);
        let command = ctrl.setpoints().clone();
        let after: Option<PlantSample> = match plant.command(&command) {
            Ok(s) => s,
            Err(e) => {
                log.abort = Some(e.to_string());
                break;
            }
        };
        let (measured, applied) = match after {
            Some(s) => (s.truth, plant.state().applied.clone()),
            None => (sample.truth, applied_before),
        };
        let state = plant.state();
        log.rows.push(TelemetryRow {
            iteration: k,
            time_s: state.time_s,
            p_set: ctrl.config().p_set,
            measured,
            applied,
            command,
            record,
            exogenous: state.exogenous.clone(),
        });
    }
    events.dedup();
    log.events = events;
    Ok(log)
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

impl TelemetryLog {
    /// CSV header. Column set is stable for format version 1.
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["iteration", "time_s", "p_set_kw", "p_pcc_kw"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(self.bus_ids.iter().map(|id| format!("v_{id}_v")));
        for u in &self.units {
            h.push(format!("u_p_{u}_kw"));
            h.push(format!("u_q_{u}_kvar"));
        }
        for u in &self.units {
            h.push(format!("applied_p_{u}_kw"));
            h.push(format!("applied_q_{u}_kvar"));
        }
        h.extend(self.legacy.iter().map(|n| format!("legacy_q_{n}_kvar")));
        h.extend(self.chargers.iter().map(|n| format!("ev_p_{n}_kw")));
        h.extend(
            ["slack_v_v", "qp_status", "eq_slack_kw", "soft_active", "active_set", "alarm"]
                .iter()
                .map(|s| s.to_string()),
        );
        h
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{}", self.csv_header().join(","))?;
        let kw = |pu: f64| self.base.kw_from_pu(pu);
        for r in &self.rows {
            let mut f: Vec<String> = vec![
                r.iteration.to_string(),
                r.time_s.to_string(),
                kw(r.p_set).to_string(),
                kw(r.measured.pcc_p).to_string(),
            ];
            f.extend(
                r.measured
                    .voltages
                    .iter()
                    .zip(&self.bus_voltage_base)
                    .map(|(v, b)| (v * b).to_string()),
            );
            f.extend(r.command.iter().map(|x| kw(*x).to_string()));
            f.extend(r.applied.iter().map(|x| kw(*x).to_string()));
            f.extend(r.exogenous.legacy_q.iter().map(|x| kw(*x).to_string()));
            f.extend(r.exogenous.ev.iter().map(|x| kw(*x).to_string()));
            f.push((r.exogenous.slack_v * self.bus_voltage_base[0]).to_string());
            f.push(r.record.status.as_str().to_string());
            f.push(kw(r.record.equality_slack).to_string());
            f.push(u8::from(r.record.soft_flag).to_string());
            f.push(r.record.active_mask());
            f.push(csv_field(r.record.alarm.as_deref().unwrap_or("")));
            writeln!(out, "{}", f.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }

    /// PCC tracking error per row, kW.
    pub fn tracking_error_kw(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| self.base.kw_from_pu(r.measured.pcc_p - r.p_set))
            .collect()
    }

    /// Φ of the applied setpoints at the final row.
    pub fn final_objective(&self) -> Option<f64> {
        self.rows.last().map(|r| crate::controller::objective(&r.applied))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KpiTolerances {
    /// Error below which flexibility counts as provided, kW.
    pub settle_kw: f64,
    /// Error below which tracking counts as exact, kW.
    pub steady_kw: f64,
    /// Samples at the end of the log judged as steady state.
    pub steady_window: usize,
    pub v_min: f64,
    pub v_max: f64,
    /// Band excess below this is not a violation, p.u.
    pub voltage_pu: f64,
    /// Latest admissible settling time, s.
    pub deadline_s: f64,
    /// Length of the trailing out-of-band window.
    pub decay_window: usize,
}

impl Default for KpiTolerances {
    fn default() -> Self {
        Self {
            settle_kw: 0.1,
            steady_kw: 0.01,
            steady_window: 10,
            v_min: 0.95,
            v_max: 1.05,
            voltage_pu: 1e-6,
            deadline_s: 120.0,
            decay_window: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settling {
    pub samples: usize,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub time_s: f64,
    /// Samples until the error is back below the settling tolerance for
    /// good; `None` if it never is.
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KpiReport {
    /// Settling after the last flexibility request; `None` = did not settle.
    pub settling: Option<Settling>,
    pub steady_state_error_kw: f64,
    pub steady_state_ok: bool,
    pub recoveries: Vec<Recovery>,
    pub voltage_violation_max_pu: f64,
    pub voltage_violation_samples: usize,
    pub energy_kwh: Vec<(String, f64)>,
    pub deadline_met: bool,
    pub decay_ok: bool,
    pub alarms: usize,
    pub soft_steps: usize,
    pub aborted: Option<String>,
}

/// Out-of-band excess of one measurement over the non-slack buses, p.u.
pub fn band_excess(m: &Measurement, tol: &KpiTolerances) -> f64 {
    m.voltages
        .iter()
        .skip(1)
        .map(|&v| (v - tol.v_max).max(tol.v_min - v).max(0.0))
        .fold(0.0, f64::max)
}

/// First index in `from..to` after which `ok` holds through `to`.
fn first_lasting(ok: &[bool], from: usize, to: usize) -> Option<usize> {
    if from >= to {
        return None;
    }
    let mut j = to;
    while j > from && ok[j - 1] {
        j -= 1;
    }
    (j < to).then_some(j)
}

/// Checks that, once the trailing window lies entirely after `start`, the
/// number of out-of-band samples in it never grows.
pub fn trailing_window_decays(out_of_band: &[bool], start: usize, window: usize) -> bool {
    let first = start + window;
    if window == 0 || out_of_band.len() < first {
        return true;
    }
    let counts: Vec<usize> = (first..=out_of_band.len())
        .map(|end| out_of_band[end - window..end].iter().filter(|&&b| b).count())
        .collect();
    counts.windows(2).all(|w| w[1] <= w[0])
}

pub fn summarize(log: &TelemetryLog, tol: &KpiTolerances) -> KpiReport {
    let n = log.rows.len();
    let err = log.tracking_error_kw();
    let within: Vec<bool> = err.iter().map(|e| e.abs() < tol.settle_kw).collect();
    let boundaries: Vec<usize> = log.events.iter().map(|&(k, _)| k).collect();
    let segment_end = |k: usize| boundaries.iter().copied().find(|&b| b > k).unwrap_or(n).min(n);

    let request = log
        .events
        .iter()
        .rev()
        .find(|&&(_, flex)| flex)
        .map(|&(k, _)| k)
        .unwrap_or(0);
    let settling = first_lasting(&within, request, segment_end(request)).map(|j| Settling {
        samples: j - request,
        time_s: (j - request) as f64 * log.sample_s,
    });

    let tail = &err[n.saturating_sub(tol.steady_window)..];
    let steady_state_error_kw = tail.iter().fold(0.0f64, |m, e| m.max(e.abs()));

    let recoveries = log
        .events
        .iter()
        .filter(|&&(_, flex)| !flex)
        .filter(|&&(k, _)| k < n)
        .map(|&(k, _)| Recovery {
            time_s: k as f64 * log.sample_s,
            samples: first_lasting(&within, k, segment_end(k)).map(|j| j - k),
        })
        .collect();

    let excess: Vec<f64> = log.rows.iter().map(|r| band_excess(&r.measured, tol)).collect();
    let out_of_band: Vec<bool> = excess.iter().map(|&e| e > tol.voltage_pu).collect();
    let last_event = boundaries.last().copied().unwrap_or(0);

    let hours = log.sample_s / 3600.0;
    let energy_kwh = log
        .units
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let e = log
                .rows
                .iter()
                .map(|r| log.base.kw_from_pu(r.applied.p(i)) * hours)
                .sum();
            (name.clone(), e)
        })
        .collect();

    KpiReport {
        deadline_met: settling.is_some_and(|s| s.time_s <= tol.deadline_s),
        settling,
        steady_state_error_kw,
        steady_state_ok: n > 0 && steady_state_error_kw < tol.steady_kw,
        recoveries,
        voltage_violation_max_pu: excess.iter().copied().filter(|&e| e > tol.voltage_pu).fold(0.0, f64::max),
        voltage_violation_samples: out_of_band.iter().filter(|&&b| b).count(),
        energy_kwh,
        decay_ok: trailing_window_decays(&out_of_band, last_event, tol.decay_window),
        alarms: log.rows.iter().filter(|r| r.record.alarm.is_some()).count(),
        soft_steps: log.rows.iter().filter(|r| r.record.soft_flag).count(),
        aborted: log.abort.clone(),
    }
}

impl KpiReport {
    /// Plain-text report, one `key = value` per line.
    pub fn render(&self, log: &TelemetryLog) -> String {
        let mut s = String::new();
        s.push_str(&format!("scenario = {}\n", log.scenario));
        s.push_str(&format!("seed = {}\n", log.seed));
        s.push_str(&format!("config_hash = {:016x}\n", log.config_hash));
        s.push_str(&format!("samples = {}\n", log.rows.len()));
        match self.settling {
            Some(st) => {
                s.push_str(&format!("settling_iterations = {}\n", st.samples));
                s.push_str(&format!("settling_time_s = {}\n", st.time_s));
            }
            None => s.push_str("settling = did not settle\n"),
        }
        s.push_str(&format!("deadline_met = {}\n", self.deadline_met));
        s.push_str(&format!("steady_state_error_kw = {}\n", self.steady_state_error_kw));
        s.push_str(&format!("steady_state_ok = {}\n", self.steady_state_ok));
        for r in &self.recoveries {
            match r.samples {
                Some(k) => s.push_str(&format!("recovery_at_{}s_samples = {}\n", r.time_s, k)),
                None => s.push_str(&format!("recovery_at_{}s_samples = did not recover\n", r.time_s)),
            }
        }
        s.push_str(&format!("voltage_violation_max_pu = {}\n", self.voltage_violation_max_pu));
        s.push_str(&format!("voltage_violation_samples = {}\n", self.voltage_violation_samples));
        s.push_str(&format!("voltage_decay_ok = {}\n", self.decay_ok));
        for (name, e) in &self.energy_kwh {
            s.push_str(&format!("energy_{name}_kwh = {e}\n"));
        }
        s.push_str(&format!("alarms = {}\n", self.alarms));
        s.push_str(&format!("soft_steps = {}\n", self.soft_steps));
        if let Some(a) = &self.aborted {
            s.push_str(&format!("aborted = {a}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::StepStatus;

    fn row(k: usize, p_kw: f64, vmax: f64) -> TelemetryRow {
        TelemetryRow {
            iteration: k,
            time_s: k as f64 * 5.0,
            p_set: 0.0,
            measured: Measurement::new(vec![1.0, vmax], p_kw / 100.0, k as f64 * 5.0),
            applied: SetpointVector::zeros(1),
            command: SetpointVector::zeros(1),
            record: StepRecord {
                iteration: k as u64,
                timestamp: k as f64 * 5.0,
                status: StepStatus::Optimal,
                equality_slack: 0.0,
                soft_flag: false,
                active: vec![false; 3],
                alarm: None,
            },
            exogenous: Exogenous {
                slack_v: 1.0,
                loads: vec![],
                ev: vec![],
                legacy_q: vec![],
            },
        }
    }

    fn log(errors_kw: &[f64], v: &[f64], events: Vec<(usize, bool)>) -> TelemetryLog {
        TelemetryLog {
            scenario: "t".into(),
            seed: 0,
            config_hash: 0,
            sample_s: 5.0,
            base: PerUnitBase { power_va: 1e5 },
            bus_ids: vec![1, 2],
            bus_voltage_base: vec![400.0, 400.0],
            units: vec!["f".into()],
            legacy: vec![],
            chargers: vec![],
            events,
            rows: errors_kw
                .iter()
                .zip(v)
                .enumerate()
                .map(|(k, (&e, &vm))| row(k, e, vm))
                .collect(),
            abort: None,
        }
    }

    #[test]
    fn never_tracking_does_not_settle() {
        let l = log(&[5.0; 20], &[1.0; 20], vec![(0, true)]);
        let k = summarize(&l, &KpiTolerances::default());
        assert_eq!(k.settling, None);
        assert!(!k.deadline_met);
        assert!(!k.steady_state_ok);
    }

    #[test]
    fn settling_counts_from_request() {
        let mut e = vec![0.0; 30];
        e[10] = 14.5;
        e[11] = 0.5;
        e[13] = 0.2;
        let l = log(&e, &[1.0; 30], vec![(10, true)]);
        let k = summarize(&l, &KpiTolerances::default());
        assert_eq!(k.settling, Some(Settling { samples: 4, time_s: 20.0 }));
        assert!(k.deadline_met && k.steady_state_ok);
    }

    #[test]
    fn single_violation_sample() {
        let mut v = vec![1.0; 12];
        v[4] = 1.051;
        let k = summarize(&log(&[0.0; 12], &v, vec![]), &KpiTolerances::default());
        assert!((k.voltage_violation_max_pu - 0.001).abs() < 1e-12);
        assert_eq!(k.voltage_violation_samples, 1);
    }

    #[test]
    fn recovery_per_disturbance() {
        let mut e = vec![0.0; 40];
        e[20] = 14.0;
        e[21] = 1.0;
        let l = log(&e, &[1.0; 40], vec![(0, true), (20, false)]);
        let k = summarize(&l, &KpiTolerances::default());
        assert_eq!(k.recoveries, vec![Recovery { time_s: 100.0, samples: Some(2) }]);
    }

    #[test]
    fn trailing_window() {
        let mut b = vec![false; 40];
        b[1] = true;
        b[2] = true;
        assert!(trailing_window_decays(&b, 0, 10));
        b[30] = true;
        assert!(!trailing_window_decays(&b, 0, 10));
        assert!(trailing_window_decays(&b, 30, 10));
    }

    #[test]
    fn csv_header_matches_rows() {
        let l = log(&[0.0, 1.0], &[1.0, 1.0], vec![]);
        let csv = l.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        let width = lines[0].split(',').count();
        assert!(lines.iter().all(|line| line.split(',').count() == width));
        assert!(lines[0].starts_with("iteration,time_s,p_set_kw,p_pcc_kw,v_1_v,v_2_v,u_p_f_kw"));
    }
}
