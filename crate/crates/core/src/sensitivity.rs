//! Steady-state sensitivity of monitored bus voltages and PCC import with
//! respect to the controllable setpoints.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::network::{DeviceSet, Exogenous, NetworkModel};
use crate::powerflow::{
    solve_power_flow_with, Admittance, PowerFlowError, PowerFlowOptions, PowerFlowProblem,
    PowerFlowSolution,
};
use crate::setpoint::SetpointVector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensitivityError {
    #[error("power flow at the linearization point: {0}")]
    BasePoint(String),
    #[error("perturbed power flow for column {column} ({label}) did not converge")]
    Column { column: usize, label: String },
    #[error("setpoint length {got} does not match 2 x {units} controllables")]
    Dimension { got: usize, units: usize },
    #[error("monitored bus index {0} out of range")]
    MonitoredBus(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityOptions {
    /// Central-difference step, p.u.
    pub step: f64,
    /// Bus indices with a voltage row; `None` = every non-slack bus.
    pub monitored: Option<Vec<usize>>,
    /// Exogenous state at the linearization point; `None` = nominal.
    pub exogenous: Option<Exogenous>,
    /// Slack magnitude used with the nominal exogenous state.
    pub slack_v: f64,
    /// Power-flow tolerance for each perturbed solve.
    pub pf_tolerance: f64,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            monitored: None,
            exogenous: None,
            slack_v: 1.0,
            pf_tolerance: 1e-12,
        }
    }
}

/// Linear map from setpoint changes to output changes, p.u. per p.u.
///
/// Rows: one per monitored bus voltage, then the PCC import row.
/// Columns: the setpoint layout `(P_0, Q_0, P_1, Q_1, ...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    monitored: Vec<usize>,
    voltage: DMatrix<f64>,
    pcc: DVector<f64>,
    operating_point: SetpointVector,
}

impl SensitivityMatrix {
    pub fn new(
        monitored: Vec<usize>,
        voltage: DMatrix<f64>,
        pcc: DVector<f64>,
        operating_point: SetpointVector,
    ) -> Self {
        assert_eq!(voltage.nrows(), monitored.len());
        assert_eq!(voltage.ncols(), pcc.len());
        assert_eq!(pcc.len(), operating_point.len());
        Self {
            monitored,
            voltage,
            pcc,
            operating_point,
        }
    }

    pub fn monitored(&self) -> &[usize] {
        &self.monitored
    }

    pub fn voltage(&self) -> &DMatrix<f64> {
        &self.voltage
    }

    pub fn pcc(&self) -> &DVector<f64> {
        &self.pcc
    }

    pub fn operating_point(&self) -> &SetpointVector {
        &self.operating_point
    }

    /// `(rows, cols)` of the stacked matrix, `rows = |monitored| + 1`.
    pub fn shape(&self) -> (usize, usize) {
        (self.monitored.len() + 1, self.pcc.len())
    }

    /// Voltage block with the PCC row appended.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (rows, cols) = self.shape();
        let mut m = DMatrix::zeros(rows, cols);
        m.rows_mut(0, rows - 1).copy_from(&self.voltage);
        m.row_mut(rows - 1).copy_from(&self.pcc.transpose());
        m
    }

    /// Multiplies every entry of the stacked matrix by the matching factor
    /// (row-major over the stacked shape).
    pub fn scaled(&self, factors: &[f64]) -> Self {
        let (rows, cols) = self.shape();
        assert_eq!(factors.len(), rows * cols);
        let mut out = self.clone();
        for r in 0..rows - 1 {
            for c in 0..cols {
                out.voltage[(r, c)] *= factors[r * cols + c];
            }
        }
        for c in 0..cols {
            out.pcc[c] *= factors[(rows - 1) * cols + c];
        }
        out
    }

    /// Euclidean norm of a voltage-block column restricted to `rows`
    /// (positions within the monitored set).
    pub fn voltage_column_norm(&self, column: usize, rows: &[usize]) -> f64 {
        rows.iter()
            .map(|&r| self.voltage[(r, column)].powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn column_label(devices: &DeviceSet, column: usize) -> String {
    let unit = &devices.controllables[column / 2].name;
    let axis = if column % 2 == 0 { "P" } else { "Q" };
    format!("{axis} of {unit}")
}

struct Linearization<'a> {
    net: &'a NetworkModel,
    devices: &'a DeviceSet,
    ybus: Admittance,
    exo: Exogenous,
    monitored: Vec<usize>,
    pf: PowerFlowOptions,
}

impl<'a> Linearization<'a> {
    fn new(
        net: &'a NetworkModel,
        devices: &'a DeviceSet,
        u0: &SetpointVector,
        opts: &SensitivityOptions,
    ) -> Result<Self, SensitivityError> {
        if u0.len() != devices.setpoint_len() {
            return Err(SensitivityError::Dimension {
                got: u0.len(),
                units: devices.controllables.len(),
            });
        }
        let monitored = opts
            .monitored
            .clone()
            .unwrap_or_else(|| net.non_slack_indices());
        if let Some(&bad) = monitored.iter().find(|&&i| i >= net.bus_count()) {
            return Err(SensitivityError::MonitoredBus(bad));
        }
        let exo = opts
            .exogenous
            .clone()
            .unwrap_or_else(|| devices.nominal_exogenous(net.base(), opts.slack_v));
        Ok(Self {
            net,
            devices,
            ybus: Admittance::new(net),
            exo,
            monitored,
            pf: PowerFlowOptions {
                tolerance: opts.pf_tolerance,
                max_iterations: 30,
            },
        })
    }

    fn solve(&self, u: &SetpointVector) -> Result<PowerFlowSolution, PowerFlowError> {
        let inj = self.devices.injections(self.net, u, &self.exo);
        solve_power_flow_with(self.net, &self.ybus, &inj, self.exo.slack_v, &self.pf)
    }

    fn outputs(&self, sol: &PowerFlowSolution) -> Vec<f64> {
        let mut y: Vec<f64> = self.monitored.iter().map(|&i| sol.vm[i]).collect();
        y.push(sol.pcc_p);
        y
    }
}

/// Central finite-difference sensitivity at `u0` with default options.
pub fn compute_sensitivity(
    net: &NetworkModel,
    devices: &DeviceSet,
    u0: &SetpointVector,
) -> Result<SensitivityMatrix, SensitivityError> {
    compute_sensitivity_with(net, devices, u0, &SensitivityOptions::default())
}

pub fn compute_sensitivity_with(
    net: &NetworkModel,
    devices: &DeviceSet,
    u0: &SetpointVector,
    opts: &SensitivityOptions,
) -> Result<SensitivityMatrix, SensitivityError> {
    let lin = Linearization::new(net, devices, u0, opts)?;
    let base = lin
        .solve(u0)
        .map_err(|e| SensitivityError::BasePoint(e.to_string()))?;
    if !base.converged {
        return Err(SensitivityError::BasePoint("did not converge".into()));
    }

    let p = u0.len();
    let rows = lin.monitored.len();
    let mut voltage = DMatrix::zeros(rows, p);
    let mut pcc = DVector::zeros(p);
    let h = opts.step;
    for col in 0..p {
        let mut plus = u0.clone();
        plus[col] += h;
        let mut minus = u0.clone();
        minus[col] -= h;
        let err = || SensitivityError::Column {
            column: col,
            label: column_label(devices, col),
        };
        let sp = lin.solve(&plus).map_err(|_| err())?;
        let sm = lin.solve(&minus).map_err(|_| err())?;
        if !(sp.converged && sm.converged) {
            return Err(err());
        }
        let (yp, ym) = (lin.outputs(&sp), lin.outputs(&sm));
        for r in 0..rows {
            voltage[(r, col)] = (yp[r] - ym[r]) / (2.0 * h);
        }
        pcc[col] = (yp[rows] - ym[rows]) / (2.0 * h);
    }
    Ok(SensitivityMatrix::new(lin.monitored, voltage, pcc, u0.clone()))
}

/// Sensitivity from the implicit-function theorem on the Newton Jacobian:
/// `dx/du = J⁻¹ ∂inj/∂u`, then the chain rule for the slack injection.
pub fn analytic_sensitivity(
    net: &NetworkModel,
    devices: &DeviceSet,
    u0: &SetpointVector,
    opts: &SensitivityOptions,
) -> Result<SensitivityMatrix, SensitivityError> {
    let lin = Linearization::new(net, devices, u0, opts)?;
    let sol = lin
        .solve(u0)
        .map_err(|e| SensitivityError::BasePoint(e.to_string()))?;
    if !sol.converged {
        return Err(SensitivityError::BasePoint("did not converge".into()));
    }
    let m = net.bus_count() - 1;
    let inj = devices.injections(net, u0, &lin.exo);
    let problem = PowerFlowProblem {
        ybus: &lin.ybus,
        injections: &inj,
        slack_v: lin.exo.slack_v,
    };
    let mut x = sol.va[1..].to_vec();
    x.extend_from_slice(&sol.vm[1..]);
    let lu = problem.jacobian(&x).lu();

    // Gradient of the slack active injection with respect to x.
    let (vm, va) = (&sol.vm, &sol.va);
    let (g, b) = (&lin.ybus.g, &lin.ybus.b);
    let mut dp0 = DVector::zeros(2 * m);
    for k in 1..=m {
        let (s, c) = (va[0] - va[k]).sin_cos();
        dp0[k - 1] = vm[0] * vm[k] * (g[(0, k)] * s - b[(0, k)] * c);
        dp0[m + k - 1] = vm[0] * (g[(0, k)] * c + b[(0, k)] * s);
    }

    let p = u0.len();
    let mut voltage = DMatrix::zeros(lin.monitored.len(), p);
    let mut pcc = DVector::zeros(p);
    for col in 0..p {
        let bus = devices.controllables[col / 2].bus;
        let mut rhs = DVector::zeros(2 * m);
        let row = if col % 2 == 0 { bus - 1 } else { m + bus - 1 };
        rhs[row] = 1.0;
        let dx = lu.solve(&rhs).ok_or_else(|| SensitivityError::Column {
            column: col,
            label: column_label(devices, col),
        })?;
        for (r, &bus_idx) in lin.monitored.iter().enumerate() {
            voltage[(r, col)] = if bus_idx == 0 { 0.0 } else { dx[m + bus_idx - 1] };
        }
        pcc[col] = dp0.dot(&dx);
    }
    Ok(SensitivityMatrix::new(lin.monitored, voltage, pcc, u0.clone()))
}
