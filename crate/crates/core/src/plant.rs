//! Quasi-static grid plant: scheduled disturbances, legacy Q(V) droop
//! settled against the power flow, delayed and noisy measurements.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::controller::Measurement;
use crate::droop::qv_droop;
use crate::network::{DeviceSet, Exogenous, NetworkModel, SetpointLimits};
use crate::powerflow::{
    solve_power_flow_with, Admittance, PowerFlowError, PowerFlowOptions, PowerFlowSolution,
};
use crate::scenario::{EventKind, Scenario, ScenarioEvent};
use crate::setpoint::SetpointVector;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    /// Samples between issuing a command and the grid seeing it.
    pub actuation_delay: usize,
    /// Samples between the grid state and the controller seeing it.
    pub measurement_delay: usize,
    /// Voltage measurement noise σ, p.u.
    pub noise_v: f64,
    /// PCC power measurement noise σ, p.u.
    pub noise_p: f64,
    pub seed: u64,
    pub droop_enabled: bool,
    pub droop_tolerance: f64,
    pub droop_max_iterations: usize,
    pub power_flow: PowerFlowOptions,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            actuation_delay: 1,
            measurement_delay: 0,
            noise_v: 0.0,
            noise_p: 0.0,
            seed: 0,
            droop_enabled: true,
            droop_tolerance: 1e-8,
            droop_max_iterations: 50,
            power_flow: PowerFlowOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("power flow failed at t = {time_s} s: {reason}")]
    Diverged { time_s: f64, reason: String },
    #[error("event at t = {time_s} s: {reason}")]
    Event { time_s: f64, reason: String },
    #[error("invalid plant configuration: {0}")]
    Config(&'static str),
}

/// Power flow with the droop output at its fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct Settled {
    pub solution: PowerFlowSolution,
    pub legacy_q: Vec<f64>,
    pub droop_converged: bool,
    pub inner_iterations: usize,
}

/// Iterates droop output ↔ power flow from `exo.legacy_q` until the droop
/// output moves less than `tolerance`. On a miss the last output is kept
/// (frozen) and `droop_converged` is false.
pub fn settle(
    net: &NetworkModel,
    ybus: &Admittance,
    devices: &DeviceSet,
    u: &SetpointVector,
    exo: &Exogenous,
    cfg: &PlantConfig,
) -> Result<Settled, PowerFlowError> {
    let mut exo = exo.clone();
    let solve = |exo: &Exogenous| {
        let inj = devices.injections(net, u, exo);
        solve_power_flow_with(net, ybus, &inj, exo.slack_v, &cfg.power_flow)
    };
    let mut sol = solve(&exo)?;
    if !cfg.droop_enabled || devices.legacy.is_empty() {
        return Ok(Settled {
            solution: sol,
            legacy_q: exo.legacy_q,
            droop_converged: true,
            inner_iterations: 0,
        });
    }
    for it in 1..=cfg.droop_max_iterations {
        if !sol.converged {
            break;
        }
        let next: Vec<f64> = devices
            .legacy
            .iter()
            .map(|inv| qv_droop(&inv.curve, sol.vm[inv.bus]))
            .collect();
        let change = next
            .iter()
            .zip(&exo.legacy_q)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        exo.legacy_q = next;
        sol = solve(&exo)?;
        if change < cfg.droop_tolerance {
            return Ok(Settled {
                solution: sol,
                legacy_q: exo.legacy_q,
                droop_converged: true,
                inner_iterations: it,
            });
        }
    }
    Ok(Settled {
        solution: sol,
        legacy_q: exo.legacy_q,
        droop_converged: false,
        inner_iterations: cfg.droop_max_iterations,
    })
}

/// Plant state between samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    /// Setpoints currently realized by the devices.
    pub applied: SetpointVector,
    pub exogenous: Exogenous,
    pub time_s: f64,
    pub sample: usize,
}

/// Result of one plant sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantSample {
    /// Noise-free outputs at this sample.
    pub truth: Measurement,
    /// What the controller receives (delayed, noisy).
    pub delivered: Measurement,
    pub solution: PowerFlowSolution,
    /// `set_flexibility` requests due at this sample, kW.
    pub requests: Vec<f64>,
    pub droop_converged: bool,
}

#[derive(Debug, Clone)]
pub struct Plant<'a> {
    net: &'a NetworkModel,
    devices: &'a DeviceSet,
    ybus: Admittance,
    cfg: PlantConfig,
    limits: SetpointLimits,
    state: PlantState,
    pending: VecDeque<(usize, SetpointVector)>,
    history: VecDeque<Measurement>,
    rng: ChaCha8Rng,
    noise_v: Option<Normal<f64>>,
    noise_p: Option<Normal<f64>>,
}

impl<'a> Plant<'a> {
    pub fn new(
        net: &'a NetworkModel,
        devices: &'a DeviceSet,
        initial: SetpointVector,
        slack_v: f64,
        cfg: PlantConfig,
    ) -> Result<Self, PlantError> {
        let normal = |s: f64| -> Result<Option<Normal<f64>>, PlantError> {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(PlantError::Config("noise sigma must be non-negative"));
            }
            Ok((s > 0.0).then(|| Normal::new(0.0, s).expect("valid sigma")))
        };
        let noise_v = normal(cfg.noise_v)?;
        let noise_p = normal(cfg.noise_p)?;
        if initial.len() != devices.setpoint_len() {
            return Err(PlantError::Config("initial setpoint length mismatch"));
        }
        let limits = devices.limits(net.base());
        let applied = limits.clamp(&initial);
        let exogenous = devices.nominal_exogenous(net.base(), slack_v);
        Ok(Self {
            net,
            devices,
            ybus: Admittance::new(net),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            limits,
            state: PlantState {
                applied,
                exogenous,
                time_s: 0.0,
                sample: 0,
            },
            pending: VecDeque::new(),
            history: VecDeque::new(),
            noise_v,
            noise_p,
        })
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    /// Checks every event of `scenario` against the device set.
    pub fn check_scenario(&self, scenario: &Scenario) -> Result<(), PlantError> {
        let mut exo = self.state.exogenous.clone();
        for e in &scenario.events {
            self.apply_event(&mut exo, e)?;
        }
        Ok(())
    }

    fn apply_event(&self, exo: &mut Exogenous, e: &ScenarioEvent) -> Result<(), PlantError> {
        let base = self.net.base();
        let err = |reason: String| PlantError::Event {
            time_s: e.time_s,
            reason,
        };
        match &e.kind {
            EventKind::SetFlexibility { .. } => {}
            EventKind::EvChargeStart { target, p_kw } => {
                let i = self
                    .devices
                    .ev_index(target)
                    .ok_or_else(|| err(format!("unknown charger {target}")))?;
                let max_kw = self.devices.ev_points[i].max_charge_w / 1e3;
                if !(*p_kw <= 0.0 && -p_kw <= max_kw) {
                    return Err(err(format!(
                        "charger {target}: p_kw {p_kw} outside [-{max_kw}, 0]"
                    )));
                }
                exo.ev[i] = base.kw_to_pu(*p_kw);
            }
            EventKind::EvChargeStop { target } => {
                let i = self
                    .devices
                    .ev_index(target)
                    .ok_or_else(|| err(format!("unknown charger {target}")))?;
                exo.ev[i] = 0.0;
            }
            EventKind::SlackVoltageChange { v_v } => {
                let v = self.net.voltage_to_pu(0, *v_v);
                if !(0.8..=1.2).contains(&v) {
                    return Err(err(format!("slack voltage {v_v} V outside [0.8, 1.2] p.u.")));
                }
                exo.slack_v = v;
            }
            EventKind::LoadChange { target, p_kw, q_kvar } => {
                let i = self
                    .devices
                    .load_index(target)
                    .ok_or_else(|| err(format!("unknown load {target}")))?;
                exo.loads[i] = (base.kw_to_pu(*p_kw), base.kw_to_pu(*q_kvar));
            }
        }
        Ok(())
    }

    fn settle_now(&mut self) -> Result<Settled, PlantError> {
        let settled = settle(
            self.net,
            &self.ybus,
            self.devices,
            &self.state.applied,
            &self.state.exogenous,
            &self.cfg,
        )
        .map_err(|e| PlantError::Diverged {
            time_s: self.state.time_s,
            reason: e.to_string(),
        })?;
        if !settled.solution.converged {
            return Err(PlantError::Diverged {
                time_s: self.state.time_s,
                reason: format!(
                    "no convergence, mismatch {:e} p.u.",
                    settled.solution.mismatch
                ),
            });
        }
        self.state.exogenous.legacy_q = settled.legacy_q.clone();
        Ok(settled)
    }

    fn truth(&self, settled: &Settled) -> Measurement {
        let mut m = Measurement::new(
            settled.solution.vm.clone(),
            settled.solution.pcc_p,
            self.state.time_s,
        );
        if !settled.droop_converged {
            m = m.invalidated();
        }
        m
    }

    fn deliver(&mut self, truth: &Measurement) -> Measurement {
        self.history.push_back(truth.clone());
        while self.history.len() > self.cfg.measurement_delay + 1 {
            self.history.pop_front();
        }
        if self.history.len() <= self.cfg.measurement_delay {
            return truth.clone().invalidated();
        }
        let mut y = self.history.front().expect("non-empty history").clone();
        if let Some(n) = self.noise_v {
            for v in y.voltages.iter_mut() {
                *v += n.sample(&mut self.rng);
            }
        }
        if let Some(n) = self.noise_p {
            y.pcc_p += n.sample(&mut self.rng);
        }
        y
    }

    /// Advances to sample `k` of `scenario`: realizes commands that have
    /// become due, applies events, settles and measures.
    pub fn step(&mut self, scenario: &Scenario, k: usize) -> Result<PlantSample, PlantError> {
        self.state.sample = k;
        self.state.time_s = scenario.sample_time(k);
        while let Some((due, _)) = self.pending.front() {
            if *due > k {
                break;
            }
            let (_, u) = self.pending.pop_front().expect("front exists");
            self.state.applied = u;
        }
        let mut requests = Vec::new();
        let mut exo = self.state.exogenous.clone();
        for e in scenario.due(k) {
            self.apply_event(&mut exo, e)?;
            if let EventKind::SetFlexibility { p_kw } = e.kind {
                requests.push(p_kw);
            }
        }
        self.state.exogenous = exo;
        let settled = self.settle_now()?;
        let truth = self.truth(&settled);
        let delivered = self.deliver(&truth);
        Ok(PlantSample {
            truth,
            delivered,
            solution: settled.solution,
            requests,
            droop_converged: settled.droop_converged,
        })
    }

    /// Queues a command issued at the current sample. It is realized at
    /// sample `current + actuation_delay`; with zero delay it is applied
    /// immediately and the returned sample reflects the new state.
    pub fn command(&mut self, u: &SetpointVector) -> Result<Option<PlantSample>, PlantError> {
        let u = self.limits.clamp(u);
        if self.cfg.actuation_delay == 0 {
            self.state.applied = u;
            let settled = self.settle_now()?;
            let truth = self.truth(&settled);
            return Ok(Some(PlantSample {
                delivered: truth.clone(),
                truth,
                solution: settled.solution,
                requests: Vec::new(),
                droop_converged: settled.droop_converged,
            }));
        }
        self.pending
            .push_back((self.state.sample + self.cfg.actuation_delay, u));
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{
        build_network, BranchSpec, BusKind, BusSpec, DeviceSpec, DroopParams, NetworkDescription,
    };

    fn feeder(with_droop: bool) -> (NetworkModel, DeviceSet) {
        let bus = |id, kind| BusSpec {
            id,
            kind,
            nominal_voltage_v: 400.0,
        };
        let mut devices = vec![DeviceSpec::Fpu {
            name: "f".into(),
            bus: 3,
            p_min_kw: -30.0,
            p_max_kw: 30.0,
            q_min_kvar: -10.0,
            q_max_kvar: 10.0,
        }];
        if with_droop {
            devices.push(DeviceSpec::Droop {
                name: "d".into(),
                bus: 3,
                rating_kva: 10.0,
                p_kw: 0.0,
                params: DroopParams::default(),
            });
        }
        let desc = NetworkDescription {
            name: "t".into(),
            base_power_kva: 100.0,
            buses: vec![bus(1, BusKind::Slack), bus(2, BusKind::Pq), bus(3, BusKind::Pq)],
            branches: vec![
                BranchSpec {
                    from: 1,
                    to: 2,
                    resistance_ohm: 0.06,
                    reactance_ohm: 0.02,
                },
                BranchSpec {
                    from: 2,
                    to: 3,
                    resistance_ohm: 0.06,
                    reactance_ohm: 0.02,
                },
            ],
            devices,
        };
        let net = build_network(&desc).unwrap();
        let dev = DeviceSet::from_description(&desc, &net).unwrap();
        (net, dev)
    }

    fn idle(duration: f64) -> Scenario {
        Scenario {
            name: "idle".into(),
            duration_s: duration,
            sample_s: 5.0,
            slack_v_v: None,
            events: vec![],
        }
    }

    #[test]
    fn empty_plant_is_flat() {
        let (net, dev) = feeder(false);
        let mut plant = Plant::new(&net, &dev, SetpointVector::zeros(1), 1.0, PlantConfig::default()).unwrap();
        let s = plant.step(&idle(10.0), 0).unwrap();
        assert!(s.truth.voltages.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(s.truth.pcc_p.abs() < 1e-12);
    }

    #[test]
    fn droop_absorbs_and_lowers_voltage() {
        let (net, dev) = feeder(true);
        let (net0, dev0) = feeder(false);
        let u = SetpointVector::from_pairs(&[(0.25, 0.0)]);
        let cfg = PlantConfig::default();
        let with = settle(&net, &Admittance::new(&net), &dev, &u, &dev.nominal_exogenous(net.base(), 1.0), &cfg).unwrap();
        let without = settle(&net0, &Admittance::new(&net0), &dev0, &u, &dev0.nominal_exogenous(net0.base(), 1.0), &cfg).unwrap();
        assert!(with.droop_converged);
        assert!(with.legacy_q[0] < 0.0);
        assert!(with.solution.vm[2] < without.solution.vm[2]);
        assert!(without.solution.vm[2] > 1.01);
    }

    #[test]
    fn droop_fixed_point_unique_from_extremes() {
        let (net, dev) = feeder(true);
        let u = SetpointVector::from_pairs(&[(0.25, 0.0)]);
        let cfg = PlantConfig::default();
        let y = Admittance::new(&net);
        let q_max = dev.legacy[0].curve.q_max;
        let results: Vec<f64> = [0.0, q_max, -q_max]
            .iter()
            .map(|&q0| {
                let mut exo = dev.nominal_exogenous(net.base(), 1.0);
                exo.legacy_q = vec![q0];
                settle(&net, &y, &dev, &u, &exo, &cfg).unwrap().legacy_q[0]
            })
            .collect();
        assert!((results[0] - results[1]).abs() < 1e-7);
        assert!((results[0] - results[2]).abs() < 1e-7);
    }

    #[test]
    fn actuation_delay_one_sample() {
        let (net, dev) = feeder(false);
        let sc = idle(20.0);
        let mut plant = Plant::new(&net, &dev, SetpointVector::zeros(1), 1.0, PlantConfig::default()).unwrap();
        let s0 = plant.step(&sc, 0).unwrap();
        assert!(plant.command(&SetpointVector::from_pairs(&[(0.1, 0.0)])).unwrap().is_none());
        let s1 = plant.step(&sc, 1).unwrap();
        assert!(s0.truth.pcc_p.abs() < 1e-12);
        assert!(s1.truth.pcc_p < -0.09);
    }

    #[test]
    fn zero_delay_applies_at_once() {
        let (net, dev) = feeder(false);
        let cfg = PlantConfig {
            actuation_delay: 0,
            ..PlantConfig::default()
        };
        let mut plant = Plant::new(&net, &dev, SetpointVector::zeros(1), 1.0, cfg).unwrap();
        plant.step(&idle(10.0), 0).unwrap();
        let s = plant.command(&SetpointVector::from_pairs(&[(0.1, 0.0)])).unwrap().unwrap();
        assert!(s.truth.pcc_p < -0.09);
    }

    #[test]
    fn measurement_delay_and_commands_are_clamped() {
        let (net, dev) = feeder(false);
        let cfg = PlantConfig {
            measurement_delay: 2,
            ..PlantConfig::default()
        };
        let sc = idle(20.0);
        let mut plant = Plant::new(&net, &dev, SetpointVector::zeros(1), 1.0, cfg).unwrap();
        let a = plant.step(&sc, 0).unwrap();
        assert!(!a.delivered.is_valid());
        plant.command(&SetpointVector::from_pairs(&[(5.0, 0.0)])).unwrap();
        let b = plant.step(&sc, 1).unwrap();
        assert!(!b.delivered.is_valid());
        assert_eq!(plant.state().applied.p(0), 0.3);
        let c = plant.step(&sc, 2).unwrap();
        assert!(c.delivered.is_valid());
        assert_eq!(c.delivered, a.truth);
    }

    #[test]
    fn memoryless_without_noise() {
        let (net, dev) = feeder(true);
        let sc = idle(20.0);
        let u = SetpointVector::from_pairs(&[(0.2, 0.05)]);
        let mut p1 = Plant::new(&net, &dev, u.clone(), 1.02, PlantConfig::default()).unwrap();
        let mut p2 = Plant::new(&net, &dev, u, 1.02, PlantConfig::default()).unwrap();
        let a = p1.step(&sc, 1).unwrap();
        let b = p2.step(&sc, 1).unwrap();
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn ev_event_bounds() {
        let (net, dev) = feeder(false);
        let plant = Plant::new(&net, &dev, SetpointVector::zeros(1), 1.0, PlantConfig::default()).unwrap();
        let sc = Scenario {
            events: vec![ScenarioEvent {
                time_s: 5.0,
                kind: EventKind::EvChargeStart {
                    target: "nope".into(),
                    p_kw: -1.0,
                },
            }],
            ..idle(10.0)
        };
        assert!(matches!(plant.check_scenario(&sc), Err(PlantError::Event { .. })));
    }
}
