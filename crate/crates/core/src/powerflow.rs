//! Newton-Raphson AC power flow in polar coordinates.
//!
//! The slack bus (index 0) holds a fixed magnitude at zero angle; every
//! other bus is a PQ bus. The unknown vector is `[θ_1..θ_n, |V|_1..|V|_n]`
//! over the non-slack buses and the mismatch vector is
//! `[P_calc − P_spec; Q_calc − Q_spec]` over the same buses.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::network::NetworkModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions {
    /// Largest admissible sum of |mismatch| over PQ buses, p.u.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PowerFlowError {
    #[error("slack voltage {0} p.u. outside [0.8, 1.2]")]
    SlackVoltageOutOfRange(f64),
    #[error("expected {expected} bus injections, got {got}")]
    InjectionCount { expected: usize, got: usize },
    #[error("non-finite injection at bus index {0}")]
    NonFiniteInjection(usize),
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
}

/// Complex power through one branch, measured at each end, p.u.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchFlow {
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
}

impl BranchFlow {
    pub fn p_loss(&self) -> f64 {
        self.p_from + self.p_to
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    /// Voltage magnitude per bus, p.u.
    pub vm: Vec<f64>,
    /// Voltage angle per bus, rad.
    pub va: Vec<f64>,
    pub branch_flows: Vec<BranchFlow>,
    /// Active power imported from the upstream grid, p.u.
    pub pcc_p: f64,
    pub pcc_q: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Sum of |mismatch| over PQ buses at the returned state, p.u.
    pub mismatch: f64,
}

impl PowerFlowSolution {
    pub fn losses(&self) -> f64 {
        self.branch_flows.iter().map(BranchFlow::p_loss).sum()
    }
}

/// Dense bus admittance matrix `Y = G + jB` (series branches only).
#[derive(Debug, Clone)]
pub struct Admittance {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl Admittance {
    pub fn new(net: &NetworkModel) -> Self {
        let n = net.bus_count();
        let mut g = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, n);
        for br in net.branches() {
            let z2 = br.r * br.r + br.x * br.x;
            let (gs, bs) = (br.r / z2, -br.x / z2);
            let (i, j) = (br.from, br.to);
            g[(i, i)] += gs;
            g[(j, j)] += gs;
            g[(i, j)] -= gs;
            g[(j, i)] -= gs;
            b[(i, i)] += bs;
            b[(j, j)] += bs;
            b[(i, j)] -= bs;
            b[(j, i)] -= bs;
        }
        Self { g, b }
    }

    /// Calculated `(P_i, Q_i)` injections at every bus.
    pub fn bus_powers(&self, vm: &[f64], va: &[f64]) -> Vec<(f64, f64)> {
        let n = vm.len();
        (0..n)
            .map(|i| {
                let (mut p, mut q) = (0.0, 0.0);
                for k in 0..n {
                    let (gik, bik) = (self.g[(i, k)], self.b[(i, k)]);
                    if gik == 0.0 && bik == 0.0 {
                        continue;
                    }
                    let (s, c) = (va[i] - va[k]).sin_cos();
                    p += vm[k] * (gik * c + bik * s);
                    q += vm[k] * (gik * s - bik * c);
                }
                (vm[i] * p, vm[i] * q)
            })
            .collect()
    }
}

/// The power-flow equations for a fixed network, injection set and slack
/// magnitude, exposed for Newton iterations and for external checks.
#[derive(Debug, Clone)]
pub struct PowerFlowProblem<'a> {
    pub ybus: &'a Admittance,
    pub injections: &'a [(f64, f64)],
    pub slack_v: f64,
}

impl PowerFlowProblem<'_> {
    fn pq_count(&self) -> usize {
        self.injections.len() - 1
    }

    /// Expands the unknown vector into full bus magnitude/angle vectors.
    pub fn unpack(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.pq_count();
        let mut va = vec![0.0; m + 1];
        let mut vm = vec![self.slack_v; m + 1];
        va[1..].copy_from_slice(&x[..m]);
        vm[1..].copy_from_slice(&x[m..]);
        (vm, va)
    }

    pub fn flat_start(&self) -> Vec<f64> {
        let m = self.pq_count();
        let mut x = vec![0.0; 2 * m];
        x[m..].iter_mut().for_each(|v| *v = self.slack_v);
        x
    }

    pub fn mismatch(&self, x: &[f64]) -> Vec<f64> {
        let m = self.pq_count();
        let (vm, va) = self.unpack(x);
        let s = self.ybus.bus_powers(&vm, &va);
        let mut f = vec![0.0; 2 * m];
        for i in 1..=m {
            f[i - 1] = s[i].0 - self.injections[i].0;
            f[m + i - 1] = s[i].1 - self.injections[i].1;
        }
        f
    }

    /// Analytic Jacobian of [`Self::mismatch`] with respect to `x`.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let m = self.pq_count();
        let (vm, va) = self.unpack(x);
        let s = self.ybus.bus_powers(&vm, &va);
        let (g, b) = (&self.ybus.g, &self.ybus.b);
        let mut jac = DMatrix::zeros(2 * m, 2 * m);
        for i in 1..=m {
            let r = i - 1;
            for k in 1..=m {
                let c = k - 1;
                if i == k {
                    let (p, q) = s[i];
                    let v2 = vm[i] * vm[i];
                    jac[(r, c)] = -q - b[(i, i)] * v2;
                    jac[(r, m + c)] = p / vm[i] + g[(i, i)] * vm[i];
                    jac[(m + r, c)] = p - g[(i, i)] * v2;
                    jac[(m + r, m + c)] = q / vm[i] - b[(i, i)] * vm[i];
                } else {
                    let (gik, bik) = (g[(i, k)], b[(i, k)]);
                    if gik == 0.0 && bik == 0.0 {
                        continue;
                    }
                    let (sn, cs) = (va[i] - va[k]).sin_cos();
                    let a = gik * sn - bik * cs;
                    let d = gik * cs + bik * sn;
                    jac[(r, c)] = vm[i] * vm[k] * a;
                    jac[(r, m + c)] = vm[i] * d;
                    jac[(m + r, c)] = -vm[i] * vm[k] * d;
                    jac[(m + r, m + c)] = vm[i] * a;
                }
            }
        }
        jac
    }
}

fn one_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn solve_power_flow(
    net: &NetworkModel,
    injections: &[(f64, f64)],
    slack_v: f64,
) -> Result<PowerFlowSolution, PowerFlowError> {
    solve_power_flow_with(net, &Admittance::new(net), injections, slack_v, &PowerFlowOptions::default())
}

/// Solves the power flow from a flat start.
///
/// Non-convergence within `max_iterations` is not an error: the returned
/// solution carries `converged = false` and the last iterate.
pub fn solve_power_flow_with(
    net: &NetworkModel,
    ybus: &Admittance,
    injections: &[(f64, f64)],
    slack_v: f64,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    if !(0.8..=1.2).contains(&slack_v) {
        return Err(PowerFlowError::SlackVoltageOutOfRange(slack_v));
    }
    if injections.len() != net.bus_count() {
        return Err(PowerFlowError::InjectionCount {
            expected: net.bus_count(),
            got: injections.len(),
        });
    }
    if let Some(i) = injections
        .iter()
        .position(|(p, q)| !(p.is_finite() && q.is_finite()))
    {
        return Err(PowerFlowError::NonFiniteInjection(i));
    }

    let problem = PowerFlowProblem {
        ybus,
        injections,
        slack_v,
    };
    let mut x = problem.flat_start();
    let mut f = problem.mismatch(&x);
    let mut norm = one_norm(&f);
    let mut iterations = 0;
    while !(norm < opts.tolerance) && iterations < opts.max_iterations {
        iterations += 1;
        let jac = problem.jacobian(&x);
        let rhs = DVector::from_iterator(f.len(), f.iter().map(|v| -v));
        let dx = jac
            .lu()
            .solve(&rhs)
            .ok_or(PowerFlowError::SingularJacobian {
                iteration: iterations,
            })?;
        x.iter_mut().zip(dx.iter()).for_each(|(xi, d)| *xi += d);
        f = problem.mismatch(&x);
        norm = one_norm(&f);
        if !norm.is_finite() {
            break;
        }
    }
    let converged = norm < opts.tolerance;
    let (vm, va) = problem.unpack(&x);

    let powers = ybus.bus_powers(&vm, &va);
    let branch_flows = net
        .branches()
        .iter()
        .map(|br| {
            let z2 = br.r * br.r + br.x * br.x;
            let (gs, bs) = (br.r / z2, -br.x / z2);
            let flow = |i: usize, j: usize| {
                let (s, c) = (va[i] - va[j]).sin_cos();
                let p = vm[i] * vm[i] * gs - vm[i] * vm[j] * (gs * c + bs * s);
                let q = -vm[i] * vm[i] * bs - vm[i] * vm[j] * (gs * s - bs * c);
                (p, q)
            };
            let (p_from, q_from) = flow(br.from, br.to);
            let (p_to, q_to) = flow(br.to, br.from);
            BranchFlow {
                p_from,
                q_from,
                p_to,
                q_to,
            }
        })
        .collect();

    Ok(PowerFlowSolution {
        vm,
        va,
        branch_flows,
        pcc_p: powers[0].0,
        pcc_q: powers[0].1,
        converged,
        iterations,
        mismatch: norm,
    })
}
