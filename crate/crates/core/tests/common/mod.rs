//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ofo_flex::network::{build_network, DeviceSet, NetworkDescription, NetworkModel};
use ofo_flex::qp::QpProblem;

pub fn lab() -> (NetworkModel, DeviceSet) {
    model(&ofo_flex::fixtures::lab_feeder())
}

pub fn model(desc: &NetworkDescription) -> (NetworkModel, DeviceSet) {
    let net = build_network(desc).expect("valid network");
    let dev = DeviceSet::from_description(desc, &net).expect("valid devices");
    (net, dev)
}

/// Inequality `c·w ≥ d`.
struct Ineq {
    c: Vec<f64>,
    d: f64,
}

/// Minimizes the QP by trying active sets in order of size; the first
/// set whose KKT point is primal and dual feasible is optimal (strict
/// convexity makes it unique).
pub fn qp_by_enumeration(p: &QpProblem) -> Option<Vec<f64>> {
    let n = p.dim();
    let (hess, lin) = p.standard_form();
    let mut eqs: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..p.b_eq.len() {
        if !p.eq_soft[i] {
            eqs.push(((0..n).map(|j| p.a_eq[(i, j)]).collect(), p.b_eq[i]));
        }
    }
    let mut ineqs = Vec::new();
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = p.alpha;
        ineqs.push(Ineq {
            c: e.clone(),
            d: p.lb_box[j] - p.offset[j],
        });
        ineqs.push(Ineq {
            c: e.iter().map(|x| -x).collect(),
            d: p.offset[j] - p.ub_box[j],
        });
    }
    for i in 0..p.lb_in.len() {
        let row: Vec<f64> = (0..n).map(|j| p.a_in[(i, j)]).collect();
        ineqs.push(Ineq {
            c: row.clone(),
            d: p.lb_in[i],
        });
        ineqs.push(Ineq {
            c: row.iter().map(|x| -x).collect(),
            d: -p.ub_in[i],
        });
    }

    let m = ineqs.len();
    for size in 0..=n.saturating_sub(eqs.len()).min(m) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            // Lower and upper of the same constraint are never both active.
            if !idx.windows(2).any(|w| w[1] == w[0] + 1 && w[0] % 2 == 0)
                && idx.iter().all(|&i| ineqs[i].d.is_finite())
            {
                if let Some(w) = kkt_point(&hess, &lin, &eqs, &ineqs, &idx) {
                    return Some(w);
                }
            }
            if !next_combination(&mut idx, m) {
                break;
            }
        }
    }
    None
}

fn next_combination(idx: &mut [usize], m: usize) -> bool {
    let k = idx.len();
    for i in (0..k).rev() {
        if idx[i] < m - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn kkt_point(
    hess: &DMatrix<f64>,
    lin: &DVector<f64>,
    eqs: &[(Vec<f64>, f64)],
    ineqs: &[Ineq],
    active: &[usize],
) -> Option<Vec<f64>> {
    let n = hess.nrows();
    let k = eqs.len() + active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    let mut rhs = DVector::zeros(n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(hess);
    for j in 0..n {
        rhs[j] = -lin[j];
    }
    let rows = eqs
        .iter()
        .map(|(c, d)| (c.as_slice(), *d))
        .chain(active.iter().map(|&i| (ineqs[i].c.as_slice(), ineqs[i].d)));
    for (r, (c, d)) in rows.enumerate() {
        for j in 0..n {
            kkt[(j, n + r)] = -c[j];
            kkt[(n + r, j)] = c[j];
        }
        rhs[n + r] = d;
    }
    let sol = kkt.clone().lu().solve(&rhs)?;
    if (&kkt * &sol - &rhs).amax() > 1e-9 {
        return None;
    }
    let w: Vec<f64> = sol.rows(0, n).iter().copied().collect();
    for (r, _) in active.iter().enumerate() {
        if sol[n + eqs.len() + r] < -1e-10 {
            return None;
        }
    }
    for q in ineqs {
        let v: f64 = q.c.iter().zip(&w).map(|(a, b)| a * b).sum();
        if v < q.d - 1e-10 {
            return None;
        }
    }
    Some(w)
}

/// Random strictly feasible projection problem with at most `max_n`
/// variables.
pub fn random_qp(seed: u64, max_n: usize) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_n);
    let alpha = rng.gen_range(0.1..1.0);
    let mut p = QpProblem::unconstrained((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect());
    p.alpha = alpha;
    p.offset = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w_feas: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
    p.lb_box = (0..n)
        .map(|j| p.offset[j] + alpha * w_feas[j] - rng.gen_range(0.0..1.0))
        .collect();
    p.ub_box = (0..n)
        .map(|j| p.offset[j] + alpha * w_feas[j] + rng.gen_range(0.0..1.0))
        .collect();
    let rows = rng.gen_range(0..=3);
    p.a_in = DMatrix::from_fn(rows, n, |_, _| rng.gen_range(-1.0..1.0));
    let at_feas: Vec<f64> = (0..rows)
        .map(|i| (0..n).map(|j| p.a_in[(i, j)] * w_feas[j]).sum())
        .collect();
    p.lb_in = at_feas.iter().map(|v| v - rng.gen_range(0.0..0.5)).collect();
    p.ub_in = at_feas.iter().map(|v| v + rng.gen_range(0.0..0.5)).collect();
    if n > 1 && rng.gen_bool(0.5) {
        p.a_eq = DMatrix::from_fn(1, n, |_, _| rng.gen_range(-1.0..1.0));
        p.b_eq = vec![(0..n).map(|j| p.a_eq[(0, j)] * w_feas[j]).sum()];
        p.eq_soft = vec![rng.gen_bool(0.3)];
        p.rho = 10.0;
    }
    p
}

/// `|V2|²` at the receiving end of a single line feeding a constant
/// power load `(p, q)` (consumption) from a slack at `v1`.
pub fn two_bus_v2_squared(v1: f64, r: f64, x: f64, p: f64, q: f64) -> f64 {
    let b = v1 * v1 - 2.0 * (p * r + q * x);
    let c = (p * p + q * q) * (r * r + x * x);
    (b + (b * b - 4.0 * c).sqrt()) / 2.0
}

/// Backward/forward sweep on a radial network. `injections` per bus,
/// p.u.; returns `(|V|, P imported at the slack)`.
pub fn sweep_power_flow(net: &NetworkModel, injections: &[(f64, f64)], slack_v: f64) -> (Vec<f64>, f64) {
    let n = net.bus_count();
    let mut parent = vec![usize::MAX; n];
    let mut z = vec![Complex::new(0.0, 0.0); n];
    let mut order = vec![0usize];
    let mut seen = vec![false; n];
    seen[0] = true;
    let mut head = 0;
    while head < order.len() {
        let b = order[head];
        head += 1;
        for br in net.branches() {
            let other = if br.from == b {
                br.to
            } else if br.to == b {
                br.from
            } else {
                continue;
            };
            if !seen[other] {
                seen[other] = true;
                parent[other] = b;
                z[other] = Complex::new(br.r, br.x);
                order.push(other);
            }
        }
    }
    let mut v = vec![Complex::new(slack_v, 0.0); n];
    for _ in 0..200 {
        let mut current: Vec<Complex<f64>> = (0..n)
            .map(|i| {
                let s = Complex::new(injections[i].0, injections[i].1);
                // Injected current flows into the network.
                (s / v[i]).conj()
            })
            .collect();
        let mut branch = vec![Complex::new(0.0, 0.0); n];
        for &b in order.iter().rev().filter(|&&b| b != 0) {
            // Current from parent toward b = consumption at b and below.
            branch[b] = -current[b];
            let child_total = branch[b];
            current[parent[b]] -= child_total;
        }
        let mut next = v.clone();
        for &b in order.iter().filter(|&&b| b != 0) {
            next[b] = next[parent[b]] - z[b] * branch[b];
        }
        let delta = next
            .iter()
            .zip(&v)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).norm()));
        v = next;
        if delta < 1e-14 {
            break;
        }
    }
    let mut i_slack = Complex::new(0.0, 0.0);
    for &b in order.iter().filter(|&&b| b != 0 && parent[b] == 0) {
        i_slack += (v[0] - v[b]) / z[b];
    }
    let s_slack = v[0] * i_slack.conj();
    (v.iter().map(|x| x.norm()).collect(), s_slack.re)
}

/// Slack plus one PQ bus joined by `r + jx` p.u. at 400 V / 100 kVA.
pub fn two_bus(r: f64, x: f64, devices: Vec<ofo_flex::network::DeviceSpec>) -> NetworkDescription {
    use ofo_flex::network::{BranchSpec, BusKind, BusSpec};
    let z_base = 400.0 * 400.0 / 100e3;
    NetworkDescription {
        name: "two_bus".into(),
        base_power_kva: 100.0,
        buses: vec![
            BusSpec {
                id: 1,
                kind: BusKind::Slack,
                nominal_voltage_v: 400.0,
            },
            BusSpec {
                id: 2,
                kind: BusKind::Pq,
                nominal_voltage_v: 400.0,
            },
        ],
        branches: vec![BranchSpec {
            from: 1,
            to: 2,
            resistance_ohm: r * z_base,
            reactance_ohm: x * z_base,
        }],
        devices,
    }
}

/// Random per-bus injections, zero at the slack, within `±scale` p.u.
pub fn random_injections(seed: u64, n: usize, scale: f64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            if i == 0 {
                (0.0, 0.0)
            } else {
                (rng.gen_range(-scale..scale), rng.gen_range(-scale..scale) * 0.5)
            }
        })
        .collect()
}

/// `exp_a` with the slack raised to 419.6 V at t = 150 s, which pushes the
/// far end over the band for one sample under actuation delay.
pub fn slack_step_scenario() -> ofo_flex::scenario::Scenario {
    use ofo_flex::scenario::{EventKind, ScenarioEvent};
    let mut sc = ofo_flex::fixtures::exp_a();
    sc.name = "exp_a_slack_step".into();
    sc.events.push(ScenarioEvent {
        time_s: 150.0,
        kind: EventKind::SlackVoltageChange { v_v: 419.6 },
    });
    sc
}

/// Outputs `[|V|..., P_PCC]` of the settled plant and their Jacobian
/// with respect to `u` by central differences.
pub fn plant_jacobian(
    net: &NetworkModel,
    devices: &ofo_flex::network::DeviceSet,
    u: &ofo_flex::setpoint::SetpointVector,
    exo: &ofo_flex::network::Exogenous,
    droop: bool,
) -> (Vec<f64>, DMatrix<f64>) {
    use ofo_flex::plant::{settle, PlantConfig};
    use ofo_flex::powerflow::{Admittance, PowerFlowOptions};
    let ybus = Admittance::new(net);
    let cfg = PlantConfig {
        droop_enabled: droop,
        droop_tolerance: 1e-13,
        power_flow: PowerFlowOptions {
            tolerance: 1e-13,
            max_iterations: 30,
        },
        ..PlantConfig::default()
    };
    let outputs = |u: &ofo_flex::setpoint::SetpointVector| {
        let s = settle(net, &ybus, devices, u, exo, &cfg).expect("plant settles");
        assert!(s.droop_converged);
        let mut y = s.solution.vm.clone();
        y.push(s.solution.pcc_p);
        y
    };
    let n = u.len();
    let y0 = outputs(u);
    let h = 1e-6;
    let mut jac = DMatrix::zeros(y0.len(), n);
    for c in 0..n {
        let mut up = u.clone();
        up[c] += h;
        let mut um = u.clone();
        um[c] -= h;
        let (yp, ym) = (outputs(&up), outputs(&um));
        for r in 0..y0.len() {
            jac[(r, c)] = (yp[r] - ym[r]) / (2.0 * h);
        }
    }
    (y0, jac)
}

/// Stationarity of `min Σu²` s.t. `P_PCC = p_set`, `band.0 ≤ V ≤ band.1`
/// on non-slack buses and the box `limits`, with the constraint state `y`
/// (`[|V|..., P_PCC]`) and output Jacobian `jac`. Constraints within
/// `active_tol` of a bound count as active; multipliers come from least
/// squares. Returns `(‖∇L‖∞, most negative inequality multiplier)`.
pub fn kkt_residual(
    u: &ofo_flex::setpoint::SetpointVector,
    y: &[f64],
    jac: &DMatrix<f64>,
    limits: &ofo_flex::network::SetpointLimits,
    band: (f64, f64),
    active_tol: f64,
) -> (f64, f64) {
    let n = u.len();
    let rows = y.len();
    // Columns of ∇c with ∇f = Σ λ ∇c and λ ≥ 0 for inequalities c ≥ 0.
    let mut grads: Vec<(DVector<f64>, bool)> = vec![(jac.row(rows - 1).transpose(), false)];
    for b in 1..rows - 1 {
        if y[b] - band.0 < active_tol {
            grads.push((jac.row(b).transpose(), true));
        }
        if band.1 - y[b] < active_tol {
            grads.push((-jac.row(b).transpose(), true));
        }
    }
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        if u[j] - limits.lower[j] < active_tol {
            grads.push((e.clone(), true));
        }
        if limits.upper[j] - u[j] < active_tol {
            grads.push((-e, true));
        }
    }
    let a = DMatrix::from_columns(&grads.iter().map(|g| g.0.clone()).collect::<Vec<_>>());
    let grad_f = DVector::from_iterator(n, u.iter().map(|x| 2.0 * x));
    let lambda = a.clone().svd(true, true).solve(&grad_f, 1e-12).expect("svd");
    let residual = (&grad_f - &a * &lambda).amax();
    let min_ineq = grads
        .iter()
        .zip(lambda.iter())
        .filter(|(g, _)| g.1)
        .fold(0.0f64, |m, (_, &l)| m.min(l));
    (residual, min_ineq)
}

/// Default closed loop from zero setpoints.
pub fn closed_loop(
    net: &NetworkModel,
    devices: &ofo_flex::network::DeviceSet,
    scenario: &ofo_flex::scenario::Scenario,
    plant: &ofo_flex::plant::PlantConfig,
) -> ofo_flex::harness::TelemetryLog {
    use ofo_flex::harness::{controller_config, initial_slack, run_closed_loop};
    let u0 = ofo_flex::setpoint::SetpointVector::zeros(devices.controllables.len());
    let cfg = controller_config(net, devices, &u0, initial_slack(net, scenario)).expect("config");
    run_closed_loop(net, devices, scenario, &cfg, plant, &u0).expect("run")
}

/// A single flexibility request at t = 0.
pub fn request_scenario(p_kw: f64, duration_s: f64) -> ofo_flex::scenario::Scenario {
    use ofo_flex::scenario::{EventKind, Scenario, ScenarioEvent};
    Scenario {
        name: "request".into(),
        duration_s,
        sample_s: 5.0,
        slack_v_v: None,
        events: vec![ScenarioEvent {
            time_s: 0.0,
            kind: EventKind::SetFlexibility { p_kw },
        }],
    }
}

/// The controller's stacked sensitivity spread over all buses
/// (`[|V|..., P_PCC]` rows, slack and unmonitored rows zero).
pub fn model_jacobian(cfg: &ofo_flex::controller::ControllerConfig, buses: usize) -> DMatrix<f64> {
    let s = cfg.sensitivity.stacked();
    let mut jac = DMatrix::zeros(buses + 1, s.ncols());
    for (r, &b) in cfg.sensitivity.monitored().iter().enumerate() {
        jac.set_row(b, &s.row(r));
    }
    jac.set_row(buses, &s.row(s.nrows() - 1));
    jac
}

/// Central differences of `[|V| monitored..., P_PCC]` computed with the
/// sweep solver (nominal exogenous state, droop output zero).
pub fn sweep_sensitivity(
    net: &NetworkModel,
    devices: &ofo_flex::network::DeviceSet,
    u0: &ofo_flex::setpoint::SetpointVector,
    monitored: &[usize],
    slack_v: f64,
    h: f64,
) -> DMatrix<f64> {
    let exo = devices.nominal_exogenous(net.base(), slack_v);
    let outputs = |u: &ofo_flex::setpoint::SetpointVector| {
        let (vm, pcc) = sweep_power_flow(net, &devices.injections(net, u, &exo), slack_v);
        let mut y: Vec<f64> = monitored.iter().map(|&b| vm[b]).collect();
        y.push(pcc);
        y
    };
    let mut jac = DMatrix::zeros(monitored.len() + 1, u0.len());
    for c in 0..u0.len() {
        let mut up = u0.clone();
        up[c] += h;
        let mut um = u0.clone();
        um[c] -= h;
        let (yp, ym) = (outputs(&up), outputs(&um));
        for r in 0..yp.len() {
            jac[(r, c)] = (yp[r] - ym[r]) / (2.0 * h);
        }
    }
    jac
}
