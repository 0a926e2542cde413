//! Online feedback optimization controller.
//!
//! Each step takes the latest grid measurement, projects the negative
//! objective gradient onto the set of setpoint changes that keep device
//! limits, the voltage band (linearized around the *measured* voltages) and
//! the PCC import target, and applies `u ← u + α w`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::network::{DeviceSet, NetworkModel, PerUnitBase, SetpointLimits};
use crate::qp::{solve_qp, ConstraintRef, QpError, QpProblem, QpSolution, QpStatus};
use crate::sensitivity::SensitivityMatrix;
use crate::setpoint::SetpointVector;

/// Grid outputs at one sample instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    /// Voltage magnitude per bus (network order), p.u.
    pub voltages: Vec<f64>,
    /// Active power imported at the PCC, p.u.
    pub pcc_p: f64,
    pub timestamp: f64,
    pub voltage_valid: Vec<bool>,
    pub pcc_valid: bool,
}

impl Measurement {
    pub fn new(voltages: Vec<f64>, pcc_p: f64, timestamp: f64) -> Self {
        let n = voltages.len();
        Self {
            voltages,
            pcc_p,
            timestamp,
            voltage_valid: vec![true; n],
            pcc_valid: true,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.pcc_valid && self.voltage_valid.iter().all(|&v| v)
    }

    pub fn invalidated(mut self) -> Self {
        self.pcc_valid = false;
        self.voltage_valid.iter_mut().for_each(|v| *v = false);
        self
    }
}

/// Which linearization of the PCC import the equality row uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PccRow {
    /// Row taken from the sensitivity matrix (loss-aware).
    #[default]
    Sensitivity,
    /// `−1` for each active-power entry, `0` for reactive ones.
    Lossless,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(&'static str),
    #[error("stale measurement: timestamp {got} not after {last}")]
    StaleMeasurement { last: f64, got: f64 },
    #[error("invalid controller configuration: {0}")]
    Config(&'static str),
    #[error("malformed projection problem: {0}")]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub alpha: f64,
    /// Per monitored row (sensitivity order), p.u.
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    /// PCC import target, p.u.
    pub p_set: f64,
    pub sensitivity: SensitivityMatrix,
    /// Penalty weight of the softened PCC row.
    pub rho: f64,
    /// Retry with a softened PCC row when the hard projection is infeasible.
    pub soft_fallback: bool,
    /// Optional per-entry bound on `|u(t+1) − u(t)|`, p.u.
    pub max_step: Option<Vec<f64>>,
    pub limits: SetpointLimits,
    pub pcc_row: PccRow,
    pub base: PerUnitBase,
}

impl ControllerConfig {
    pub const DEFAULT_ALPHA: f64 = 0.3;
    pub const DEFAULT_RHO: f64 = 1e4;
    pub const DEFAULT_BAND: f64 = 0.05;

    /// Defaults: α = 0.3, ρ = 1e4, band V_N ± 5 %, P_set = 0.
    pub fn new(net: &NetworkModel, devices: &DeviceSet, sensitivity: SensitivityMatrix) -> Self {
        let rows = sensitivity.monitored().len();
        Self {
            alpha: Self::DEFAULT_ALPHA,
            v_min: vec![1.0 - Self::DEFAULT_BAND; rows],
            v_max: vec![1.0 + Self::DEFAULT_BAND; rows],
            p_set: 0.0,
            sensitivity,
            rho: Self::DEFAULT_RHO,
            soft_fallback: true,
            max_step: None,
            limits: devices.limits(net.base()),
            pcc_row: PccRow::Sensitivity,
            base: net.base(),
        }
    }

    pub fn with_voltage_band(mut self, fraction: f64) -> Self {
        let rows = self.v_min.len();
        self.v_min = vec![1.0 - fraction; rows];
        self.v_max = vec![1.0 + fraction; rows];
        self
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ControllerError::Config("alpha must be positive"));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(ControllerError::Config("rho must be positive"));
        }
        let rows = self.sensitivity.monitored().len();
        if self.v_min.len() != rows || self.v_max.len() != rows {
            return Err(ControllerError::Config("voltage band length differs from monitored rows"));
        }
        if self.v_min.iter().zip(&self.v_max).any(|(lo, hi)| !(lo < hi)) {
            return Err(ControllerError::Config("v_min must be below v_max"));
        }
        if self.limits.lower.len() != self.sensitivity.operating_point().len() {
            return Err(ControllerError::Config("device limits do not match sensitivity columns"));
        }
        if let Some(step) = &self.max_step {
            if step.len() != self.limits.lower.len() || step.iter().any(|s| !(*s >= 0.0)) {
                return Err(ControllerError::Config("max_step must be non-negative per entry"));
            }
        }
        Ok(())
    }

    pub fn p_set_kw(&self) -> f64 {
        self.base.kw_from_pu(self.p_set)
    }

    fn pcc_coefficients(&self) -> Vec<f64> {
        match self.pcc_row {
            PccRow::Sensitivity => self.sensitivity.pcc().iter().copied().collect(),
            PccRow::Lossless => (0..self.sensitivity.pcc().len())
                .map(|j| if j % 2 == 0 { -1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// Returns a copy of `cfg` tracking `p_set_kw` at the PCC.
pub fn set_flexibility_request(cfg: &ControllerConfig, p_set_kw: f64) -> ControllerConfig {
    ControllerConfig {
        p_set: cfg.base.kw_to_pu(p_set_kw),
        ..cfg.clone()
    }
}

/// Φ(u) = Σ P_i² + Q_i².
pub fn objective(u: &SetpointVector) -> f64 {
    u.iter().map(|x| x * x).sum()
}

/// ∇Φ = 2u. Φ does not depend on the measured outputs, so the full
/// `H(u)ᵀ ∇Φ(u, y)` reduces to the same vector.
pub fn objective_gradient(u: &SetpointVector) -> Vec<f64> {
    u.iter().map(|x| 2.0 * x).collect()
}

/// Builds the projection QP for one controller step. The PCC row is
/// emitted as a hard equality.
pub fn assemble_projection_qp(
    u: &SetpointVector,
    y: &Measurement,
    cfg: &ControllerConfig,
) -> Result<QpProblem, ControllerError> {
    cfg.validate()?;
    let p = u.len();
    let sens = &cfg.sensitivity;
    if p != sens.operating_point().len() {
        return Err(ControllerError::Config("setpoint length differs from sensitivity columns"));
    }
    if !y.is_valid() {
        return Err(ControllerError::InvalidMeasurement("channel flagged invalid"));
    }
    if !y.pcc_p.is_finite() {
        return Err(ControllerError::InvalidMeasurement("non-finite PCC power"));
    }
    let monitored = sens.monitored();
    let mut v_meas = Vec::with_capacity(monitored.len());
    for &bus in monitored {
        match y.voltages.get(bus) {
            Some(&v) if v.is_finite() && v > 0.0 => v_meas.push(v),
            Some(_) => return Err(ControllerError::InvalidMeasurement("non-positive voltage")),
            None => return Err(ControllerError::InvalidMeasurement("missing voltage channel")),
        }
    }

    let alpha = cfg.alpha;
    let s_pcc = cfg.pcc_coefficients();
    let a_eq = DMatrix::from_fn(1, p, |_, j| alpha * s_pcc[j]);
    let a_in = DMatrix::from_fn(monitored.len(), p, |r, j| alpha * sens.voltage()[(r, j)]);
    let lb_in = cfg.v_min.iter().zip(&v_meas).map(|(lo, v)| lo - v).collect();
    let ub_in = cfg.v_max.iter().zip(&v_meas).map(|(hi, v)| hi - v).collect();

    let (mut lb_box, mut ub_box) = (cfg.limits.lower.clone(), cfg.limits.upper.clone());
    if let Some(step) = &cfg.max_step {
        for j in 0..p {
            lb_box[j] = lb_box[j].max(u[j] - step[j]).min(ub_box[j]);
            ub_box[j] = ub_box[j].min(u[j] + step[j]).max(lb_box[j]);
        }
    }

    Ok(QpProblem {
        g: objective_gradient(u),
        a_eq,
        b_eq: vec![cfg.p_set - y.pcc_p],
        eq_soft: vec![false],
        rho: cfg.rho,
        a_in,
        lb_in,
        ub_in,
        lb_box,
        ub_box,
        offset: u.as_slice().to_vec(),
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    /// Hard projection solved.
    Optimal,
    /// Hard projection infeasible; softened PCC row solved.
    SoftOptimal,
    /// No admissible projection; setpoints held.
    Infeasible,
    /// QP iteration cap hit; setpoints held.
    MaxIter,
    /// Measurement unusable; setpoints held.
    InvalidMeasurement,
}

impl StepStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StepStatus::Optimal => "optimal",
            StepStatus::SoftOptimal => "soft_optimal",
            StepStatus::Infeasible => "infeasible",
            StepStatus::MaxIter => "max_iter",
            StepStatus::InvalidMeasurement => "invalid_measurement",
        }
    }

    pub fn held(self) -> bool {
        matches!(
            self,
            StepStatus::Infeasible | StepStatus::MaxIter | StepStatus::InvalidMeasurement
        )
    }
}

/// Soft-row slack above this (p.u.) is flagged in telemetry.
pub const SOFT_SLACK_FLAG: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub timestamp: f64,
    pub status: StepStatus,
    /// Linearized PCC-row residual `α s·w − (P_set − P_meas)`, p.u.
    pub equality_slack: f64,
    pub soft_flag: bool,
    /// Binding box per setpoint entry, then binding voltage row per
    /// monitored bus.
    pub active: Vec<bool>,
    pub alarm: Option<String>,
}

impl StepRecord {
    fn held(
        iteration: u64,
        timestamp: f64,
        status: StepStatus,
        width: usize,
        alarm: String,
    ) -> Self {
        Self {
            iteration,
            timestamp,
            status,
            equality_slack: 0.0,
            soft_flag: false,
            active: vec![false; width],
            alarm: Some(alarm),
        }
    }

    /// Active set as a string of `0`/`1`, box entries first.
    pub fn active_mask(&self) -> String {
        self.active.iter().map(|&a| if a { '1' } else { '0' }).collect()
    }
}

fn active_flags(sol: &QpSolution, p: usize, rows: usize) -> Vec<bool> {
    let mut flags = vec![false; p + rows];
    for c in &sol.active_set {
        match *c {
            ConstraintRef::BoxLower(j) | ConstraintRef::BoxUpper(j) => flags[j] = true,
            ConstraintRef::RowLower(i) | ConstraintRef::RowUpper(i) => flags[p + i] = true,
            ConstraintRef::Equality(_) => {}
        }
    }
    flags
}

/// One controller iteration: gradient, projection, update.
///
/// Malformed input and unusable measurements are returned as `Err`; an
/// infeasible projection is not an error: the previous setpoints are
/// returned with an alarm in the record.
pub fn controller_step(
    u: &SetpointVector,
    y: &Measurement,
    cfg: &ControllerConfig,
) -> Result<(SetpointVector, StepRecord), ControllerError> {
    let mut qp = assemble_projection_qp(u, y, cfg)?;
    let p = u.len();
    let rows = cfg.sensitivity.monitored().len();
    let mut status = StepStatus::Optimal;
    let mut sol = solve_qp(&qp)?;
    if sol.status == QpStatus::Infeasible && cfg.soft_fallback {
        qp.eq_soft = vec![true];
        sol = solve_qp(&qp)?;
        status = StepStatus::SoftOptimal;
    }
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible | QpStatus::MaxIter => {
            let held = if sol.status == QpStatus::Infeasible {
                StepStatus::Infeasible
            } else {
                StepStatus::MaxIter
            };
            let alarm = format!(
                "projection {}; most violated {:?}; holding setpoints",
                sol.status.as_str(),
                sol.violated
            );
            return Ok((u.clone(), StepRecord::held(0, y.timestamp, held, p + rows, alarm)));
        }
    }

    let stepped: Vec<f64> = u
        .iter()
        .zip(&sol.w)
        .map(|(ui, wi)| ui + cfg.alpha * wi)
        .collect();
    // Rounding can leave the update a few ulps outside the box.
    let next = SetpointVector::from_vec(
        stepped
            .iter()
            .zip(qp.lb_box.iter().zip(&qp.ub_box))
            .map(|(x, (lo, hi))| x.clamp(*lo, *hi))
            .collect(),
    );
    let eq_row: f64 = (0..p).map(|j| qp.a_eq[(0, j)] * sol.w[j]).sum();
    let equality_slack = eq_row - qp.b_eq[0];
    let record = StepRecord {
        iteration: 0,
        timestamp: y.timestamp,
        status,
        equality_slack,
        soft_flag: equality_slack.abs() > SOFT_SLACK_FLAG,
        active: active_flags(&sol, p, rows),
        alarm: None,
    };
    Ok((next, record))
}

/// Stateful wrapper enforcing the run-time policies: monotone timestamps,
/// hold-on-invalid, atomic configuration updates between steps.
#[derive(Debug, Clone)]
pub struct OfoController {
    cfg: ControllerConfig,
    u: SetpointVector,
    iteration: u64,
    last_timestamp: Option<f64>,
}

impl OfoController {
    pub fn new(cfg: ControllerConfig, initial: SetpointVector) -> Result<Self, ControllerError> {
        cfg.validate()?;
        if initial.len() != cfg.limits.lower.len() {
            return Err(ControllerError::Config("initial setpoint length mismatch"));
        }
        let u = cfg.limits.clamp(&initial);
        Ok(Self {
            cfg,
            u,
            iteration: 0,
            last_timestamp: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn setpoints(&self) -> &SetpointVector {
        &self.u
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn set_flexibility_request(&mut self, p_set_kw: f64) {
        self.cfg = set_flexibility_request(&self.cfg, p_set_kw);
    }

    pub fn step(&mut self, y: &Measurement) -> StepRecord {
        let iteration = self.iteration;
        self.iteration += 1;
        let width = self.u.len() + self.cfg.sensitivity.monitored().len();
        if let Some(last) = self.last_timestamp {
            if !(y.timestamp > last) && y.is_valid() {
                let e = ControllerError::StaleMeasurement {
                    last,
                    got: y.timestamp,
                };
                return StepRecord::held(
                    iteration,
                    y.timestamp,
                    StepStatus::InvalidMeasurement,
                    width,
                    e.to_string(),
                );
            }
        }
        match controller_step(&self.u, y, &self.cfg) {
            Ok((next, mut record)) => {
                self.last_timestamp = Some(y.timestamp);
                self.u = next;
                record.iteration = iteration;
                record
            }
            Err(e) => StepRecord::held(
                iteration,
                y.timestamp,
                StepStatus::InvalidMeasurement,
                width,
                e.to_string(),
            ),
        }
    }
}
