//! Model-based reference optimum of the flexibility problem, used offline
//! to certify the closed-loop steady state.
//!
//! Minimizes Φ(u) = ‖u‖² subject to `P_PCC(u) = P_set`, the voltage band
//! at every monitored bus and the device box, where `P_PCC` and `V` come
//! from the full plant map (power flow with the droop settled). The
//! solver is an augmented Lagrangian whose box-constrained subproblems are
//! solved by spectral projected gradient with central-difference
//! gradients, restarted from random interior points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::batch::{batch_map, BatchMode};
use crate::network::{DeviceSet, Exogenous, NetworkModel, SetpointLimits};
use crate::plant::{settle, PlantConfig};
use crate::powerflow::{Admittance, PowerFlowOptions};
use crate::setpoint::SetpointVector;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// PCC import target, p.u.
    pub p_set: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub exogenous: Exogenous,
    /// Bus indices with a voltage constraint; `None` = every non-slack bus.
    pub monitored: Option<Vec<usize>>,
    pub restarts: usize,
    pub seed: u64,
    /// Projected-gradient stationarity tolerance.
    pub tolerance: f64,
    /// Constraint violation tolerance, p.u.
    pub feasibility: f64,
    pub fd_step: f64,
    pub mode: BatchMode,
}

impl OracleConfig {
    pub fn new(net: &NetworkModel, devices: &DeviceSet, p_set: f64, slack_v: f64) -> Self {
        Self {
            p_set,
            v_min: 0.95,
            v_max: 1.05,
            exogenous: devices.nominal_exogenous(net.base(), slack_v),
            monitored: None,
            restarts: 10,
            seed: 0,
            tolerance: 1e-7,
            feasibility: 1e-8,
            fd_step: 1e-5,
            mode: BatchMode::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub u: SetpointVector,
    pub objective: f64,
    pub pcc_p: f64,
    /// All bus voltages at the optimum, p.u.
    pub voltages: Vec<f64>,
    /// ‖P(u − ∇L) − u‖∞ at exit.
    pub stationarity: f64,
    pub max_violation: f64,
    /// Restarts that reached a feasible stationary point.
    pub converged_restarts: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error(
        "request of {p_set_kw} kW not attainable; closest PCC import {closest_kw} kW; binding: {}",
        binding.join(", ")
    )]
    Infeasible {
        p_set_kw: f64,
        closest_kw: f64,
        binding: Vec<String>,
    },
    #[error("plant map failed at the restart points: {0}")]
    PlantMap(String),
}

/// Plant map evaluated with tight tolerances.
struct Map<'a> {
    net: &'a NetworkModel,
    devices: &'a DeviceSet,
    ybus: Admittance,
    exo: Exogenous,
    plant: PlantConfig,
    monitored: Vec<usize>,
    limits: SetpointLimits,
    cfg: &'a OracleConfig,
}

/// Constraint values at one point: `h` = PCC equality, `g` ≤ 0 voltages.
struct Point {
    u: Vec<f64>,
    h: f64,
    g: Vec<f64>,
    vm: Vec<f64>,
}

impl<'a> Map<'a> {
    fn eval(&self, u: &[f64]) -> Option<Point> {
        let sv = SetpointVector::from_vec(u.to_vec());
        let s = settle(self.net, &self.ybus, self.devices, &sv, &self.exo, &self.plant).ok()?;
        if !s.solution.converged {
            return None;
        }
        let vm = s.solution.vm;
        let mut g = Vec::with_capacity(2 * self.monitored.len());
        for &i in &self.monitored {
            g.push(vm[i] - self.cfg.v_max);
            g.push(self.cfg.v_min - vm[i]);
        }
        Some(Point {
            u: u.to_vec(),
            h: s.solution.pcc_p - self.cfg.p_set,
            g,
            vm,
        })
    }

    /// Central-difference Jacobian rows: `h` first, then each `g`.
    fn jacobian(&self, u: &[f64]) -> Option<Vec<Vec<f64>>> {
        let d = self.cfg.fd_step;
        let rows = 1 + 2 * self.monitored.len();
        let mut jac = vec![vec![0.0; u.len()]; rows];
        for j in 0..u.len() {
            let mut up = u.to_vec();
            up[j] += d;
            let mut dn = u.to_vec();
            dn[j] -= d;
            let (a, b) = (self.eval(&up)?, self.eval(&dn)?);
            jac[0][j] = (a.h - b.h) / (2.0 * d);
            for r in 0..a.g.len() {
                jac[1 + r][j] = (a.g[r] - b.g[r]) / (2.0 * d);
            }
        }
        Some(jac)
    }

    fn project(&self, u: &mut [f64]) {
        for (j, x) in u.iter_mut().enumerate() {
            *x = x.clamp(self.limits.lower[j], self.limits.upper[j]);
        }
    }
}

struct Multipliers {
    lambda: f64,
    nu: Vec<f64>,
    mu: f64,
}

impl Multipliers {
    fn lagrangian(&self, p: &Point) -> f64 {
        let phi: f64 = p.u.iter().map(|x| x * x).sum();
        let eq = self.lambda * p.h + 0.5 * self.mu * p.h * p.h;
        let ineq: f64 = p
            .g
            .iter()
            .zip(&self.nu)
            .map(|(g, nu)| ((nu + self.mu * g).max(0.0).powi(2) - nu * nu) / (2.0 * self.mu))
            .sum();
        phi + eq + ineq
    }

    fn gradient(&self, p: &Point, jac: &[Vec<f64>]) -> Vec<f64> {
        let mut grad: Vec<f64> = p.u.iter().map(|x| 2.0 * x).collect();
        let weq = self.lambda + self.mu * p.h;
        for (j, gj) in grad.iter_mut().enumerate() {
            *gj += weq * jac[0][j];
        }
        for (r, (g, nu)) in p.g.iter().zip(&self.nu).enumerate() {
            let w = (nu + self.mu * g).max(0.0);
            if w > 0.0 {
                for (j, gj) in grad.iter_mut().enumerate() {
                    *gj += w * jac[1 + r][j];
                }
            }
        }
        grad
    }
}

fn violation(p: &Point) -> f64 {
    p.g.iter().fold(p.h.abs(), |m, &g| m.max(g))
}

struct Outcome {
    point: Point,
    stationarity: f64,
    converged: bool,
}

fn projected_step(map: &Map, u: &[f64], grad: &[f64], scale: f64) -> Vec<f64> {
    let mut x: Vec<f64> = u.iter().zip(grad).map(|(a, g)| a - scale * g).collect();
    map.project(&mut x);
    x
}

fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Spectral projected gradient on the augmented Lagrangian.
fn minimize_subproblem(map: &Map, m: &Multipliers, start: Point, tol: f64) -> Option<(Point, f64)> {
    const MAX_ITER: usize = 2000;
    let mut p = start;
    let mut jac = map.jacobian(&p.u)?;
    let mut grad = m.gradient(&p, &jac);
    let mut recent = vec![m.lagrangian(&p)];
    let mut sigma = 1.0 / grad.iter().fold(1e-12f64, |a, g| a.max(g.abs()));
    let mut stat = inf_dist(&projected_step(map, &p.u, &grad, 1.0), &p.u);
    for _ in 0..MAX_ITER {
        if stat < tol {
            break;
        }
        let target = projected_step(map, &p.u, &grad, sigma.clamp(1e-12, 1e12));
        let d: Vec<f64> = target.iter().zip(&p.u).map(|(a, b)| a - b).collect();
        let slope: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
        // Non-monotone Armijo reference: tolerates evaluation noise.
        let reference = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut t = 1.0;
        let next = loop {
            let x: Vec<f64> = p.u.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            if let Some(q) = map.eval(&x) {
                let v = m.lagrangian(&q);
                if v <= reference + 1e-4 * t * slope {
                    break Some((q, v));
                }
            }
            t *= 0.5;
            if t < 1e-12 {
                break None;
            }
        };
        let Some((q, v)) = next else { break };
        let jac_next = map.jacobian(&q.u)?;
        let grad_next = m.gradient(&q, &jac_next);
        let s: Vec<f64> = q.u.iter().zip(&p.u).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_next.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        sigma = if sy > 0.0 { ss / sy } else { 1e12 };
        p = q;
        jac = jac_next;
        grad = grad_next;
        recent.push(v);
        if recent.len() > 10 {
            recent.remove(0);
        }
        stat = inf_dist(&projected_step(map, &p.u, &grad, 1.0), &p.u);
    }
    let _ = jac;
    Some((p, stat))
}

fn solve_from(map: &Map, u0: Vec<f64>) -> Option<Outcome> {
    let rows = 2 * map.monitored.len();
    let mut m = Multipliers {
        lambda: 0.0,
        nu: vec![0.0; rows],
        mu: 10.0,
    };
    let mut point = map.eval(&u0)?;
    let mut prev = f64::INFINITY;
    let mut stationarity = f64::INFINITY;
    for _ in 0..80 {
        let (p, stat) = minimize_subproblem(map, &m, point, map.cfg.tolerance)?;
        point = p;
        stationarity = stat;
        let viol = violation(&point);
        m.lambda += m.mu * point.h;
        for (nu, g) in m.nu.iter_mut().zip(&point.g) {
            *nu = (*nu + m.mu * g).max(0.0);
        }
        if viol < map.cfg.feasibility && stationarity < map.cfg.tolerance {
            return Some(Outcome {
                point,
                stationarity,
                converged: true,
            });
        }
        if viol > 0.25 * prev && viol > map.cfg.feasibility {
            m.mu *= 10.0;
        }
        prev = viol;
        if m.mu > 1e14 {
            break;
        }
    }
    Some(Outcome {
        point,
        stationarity,
        converged: false,
    })
}

fn binding_report(map: &Map, p: &Point) -> Vec<String> {
    let mut out = Vec::new();
    for (j, &x) in p.u.iter().enumerate() {
        let unit = &map.devices.controllables[j / 2].name;
        let axis = if j % 2 == 0 { "P" } else { "Q" };
        if x >= map.limits.upper[j] - 1e-6 {
            out.push(format!("{axis} of {unit} at upper limit"));
        } else if x <= map.limits.lower[j] + 1e-6 {
            out.push(format!("{axis} of {unit} at lower limit"));
        }
    }
    for (r, &i) in map.monitored.iter().enumerate() {
        let id = map.net.buses()[i].id;
        if p.g[2 * r] > -1e-6 {
            out.push(format!("voltage of bus {id} at upper band"));
        }
        if p.g[2 * r + 1] > -1e-6 {
            out.push(format!("voltage of bus {id} at lower band"));
        }
    }
    out
}

/// Reference optimum over `cfg.restarts` seeded interior starting points.
pub fn reference_opf(
    net: &NetworkModel,
    devices: &DeviceSet,
    cfg: &OracleConfig,
) -> Result<OracleSolution, OracleError> {
    let limits = devices.limits(net.base());
    let map = Map {
        net,
        devices,
        ybus: Admittance::new(net),
        exo: cfg.exogenous.clone(),
        plant: PlantConfig {
            droop_tolerance: 1e-13,
            droop_max_iterations: 200,
            power_flow: PowerFlowOptions {
                tolerance: 1e-12,
                max_iterations: 40,
            },
            ..PlantConfig::default()
        },
        monitored: cfg.monitored.clone().unwrap_or_else(|| net.non_slack_indices()),
        limits,
        cfg,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts: Vec<Vec<f64>> = (0..cfg.restarts.max(1))
        .map(|_| {
            (0..devices.setpoint_len())
                .map(|j| {
                    let (lo, hi) = (map.limits.lower[j], map.limits.upper[j]);
                    lo + (hi - lo) * rng.gen_range(0.05..0.95)
                })
                .collect()
        })
        .collect();
    let outcomes: Vec<Option<Outcome>> = batch_map(cfg.mode, starts, |u0| solve_from(&map, u0));
    let outcomes: Vec<Outcome> = outcomes.into_iter().flatten().collect();
    if outcomes.is_empty() {
        return Err(OracleError::PlantMap("no restart produced a solvable power flow".into()));
    }
    let converged = outcomes.iter().filter(|o| o.converged).count();
    let objective = |p: &Point| p.u.iter().map(|x| x * x).sum::<f64>();
    let best = outcomes
        .iter()
        .filter(|o| o.converged)
        .min_by(|a, b| objective(&a.point).total_cmp(&objective(&b.point)));
    match best {
        Some(o) => Ok(OracleSolution {
            u: SetpointVector::from_vec(o.point.u.clone()),
            objective: objective(&o.point),
            pcc_p: o.point.h + cfg.p_set,
            voltages: o.point.vm.clone(),
            stationarity: o.stationarity,
            max_violation: violation(&o.point),
            converged_restarts: converged,
        }),
        None => {
            let closest = outcomes
                .iter()
                .min_by(|a, b| violation(&a.point).total_cmp(&violation(&b.point)))
                .expect("non-empty");
            Err(OracleError::Infeasible {
                p_set_kw: net.base().kw_from_pu(cfg.p_set),
                closest_kw: net.base().kw_from_pu(closest.point.h + cfg.p_set),
                binding: binding_report(&map, &closest.point),
            })
        }
    }
}
