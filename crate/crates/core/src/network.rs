//! Static grid topology, per-unit bases and the attached devices.
//!
//! A [`NetworkDescription`] is the parsed, unit-bearing form of a network
//! file (kW, kvar, V, Ω). [`build_network`] validates it and produces a
//! per-unit [`NetworkModel`]; [`DeviceSet::from_description`] does the same
//! for the devices. Everything downstream works in per-unit.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::droop::{DroopCurve, DroopCurveError};
use crate::setpoint::SetpointVector;

pub type BusId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Slack,
    Pq,
}

impl BusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BusKind::Slack => "slack",
            BusKind::Pq => "pq",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusSpec {
    pub id: BusId,
    pub kind: BusKind,
    pub nominal_voltage_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec {
    pub from: BusId,
    pub to: BusId,
    pub resistance_ohm: f64,
    pub reactance_ohm: f64,
}

/// Droop parameters as written in a network file (breakpoints in V).
/// Unset breakpoints fall back to [`DroopCurve::for_rating`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DroopParams {
    pub v_lo_v: Option<f64>,
    pub v_db_lo_v: Option<f64>,
    pub v_db_hi_v: Option<f64>,
    pub v_hi_v: Option<f64>,
    pub q_max_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeviceSpec {
    Fpu {
        name: String,
        bus: BusId,
        p_min_kw: f64,
        p_max_kw: f64,
        q_min_kvar: f64,
        q_max_kvar: f64,
    },
    Droop {
        name: String,
        bus: BusId,
        rating_kva: f64,
        p_kw: f64,
        params: DroopParams,
    },
    Load {
        name: String,
        bus: BusId,
        p_kw: f64,
        q_kvar: f64,
    },
    Ev {
        name: String,
        bus: BusId,
        max_kw: f64,
    },
}

impl DeviceSpec {
    pub fn name(&self) -> &str {
        match self {
            DeviceSpec::Fpu { name, .. }
            | DeviceSpec::Droop { name, .. }
            | DeviceSpec::Load { name, .. }
            | DeviceSpec::Ev { name, .. } => name,
        }
    }

    pub fn bus(&self) -> BusId {
        match self {
            DeviceSpec::Fpu { bus, .. }
            | DeviceSpec::Droop { bus, .. }
            | DeviceSpec::Load { bus, .. }
            | DeviceSpec::Ev { bus, .. } => *bus,
        }
    }
}

/// Parsed network file.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDescription {
    pub name: String,
    pub base_power_kva: f64,
    pub buses: Vec<BusSpec>,
    pub branches: Vec<BranchSpec>,
    pub devices: Vec<DeviceSpec>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("duplicate bus id {0}")]
    DuplicateBusId(BusId),
    #[error("multiple slack buses")]
    MultipleSlackBuses,
    #[error("missing slack bus")]
    MissingSlack,
    #[error("disconnected graph: buses {0:?} unreachable from the slack")]
    Disconnected(Vec<BusId>),
    #[error("zero-impedance branch {from}-{to}")]
    ZeroImpedance { from: BusId, to: BusId },
    #[error("negative resistance on branch {from}-{to}")]
    NegativeResistance { from: BusId, to: BusId },
    #[error("branch {from}-{to} connects a bus to itself")]
    SelfLoop { from: BusId, to: BusId },
    #[error("branch {from}-{to} joins different voltage levels")]
    VoltageLevelMismatch { from: BusId, to: BusId },
    #[error("{element} references unknown bus {bus}")]
    UnknownBus { element: String, bus: BusId },
    #[error("bus {0}: nominal voltage must be positive")]
    NonPositiveNominalVoltage(BusId),
    #[error("base power must be positive")]
    NonPositiveBase,
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeviceError {
    #[error("device {device} references unknown bus {bus}")]
    UnknownBus { device: String, bus: BusId },
    #[error("device {device} sits on the slack bus")]
    OnSlackBus { device: String },
    #[error("device {device}: {what}")]
    InvalidLimits { device: String, what: &'static str },
    #[error("duplicate device name {0}")]
    DuplicateName(String),
    #[error("device {device}: {source}")]
    Droop {
        device: String,
        #[source]
        source: DroopCurveError,
    },
}

/// Per-unit system: one power base, voltage base equal to each bus's
/// nominal voltage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerUnitBase {
    pub power_va: f64,
}

impl PerUnitBase {
    pub const DEFAULT_POWER_VA: f64 = 100_000.0;
    pub const DEFAULT_VOLTAGE_V: f64 = 400.0;

    pub fn power_to_pu(&self, watts: f64) -> f64 {
        watts / self.power_va
    }

    pub fn power_from_pu(&self, pu: f64) -> f64 {
        pu * self.power_va
    }

    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw * 1e3 / self.power_va
    }

    pub fn kw_from_pu(&self, pu: f64) -> f64 {
        pu * self.power_va / 1e3
    }

    pub fn impedance_base(&self, voltage_base_v: f64) -> f64 {
        voltage_base_v * voltage_base_v / self.power_va
    }

    pub fn impedance_to_pu(&self, ohm: f64, voltage_base_v: f64) -> f64 {
        ohm / self.impedance_base(voltage_base_v)
    }

    pub fn impedance_from_pu(&self, pu: f64, voltage_base_v: f64) -> f64 {
        pu * self.impedance_base(voltage_base_v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    pub nominal_voltage_v: f64,
}

/// Branch with bus indices into [`NetworkModel::buses`] and per-unit series
/// impedance.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

/// Validated per-unit network. Bus 0 is always the slack/PCC; the rest
/// follow in ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    name: String,
    base: PerUnitBase,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    index: BTreeMap<BusId, usize>,
}

impl NetworkModel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base(&self) -> PerUnitBase {
        self.base
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn pcc_bus(&self) -> BusId {
        self.buses[0].id
    }

    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Indices of every non-slack bus, the default monitored set.
    pub fn non_slack_indices(&self) -> Vec<usize> {
        (1..self.buses.len()).collect()
    }

    pub fn voltage_to_pu(&self, bus: usize, volts: f64) -> f64 {
        volts / self.buses[bus].nominal_voltage_v
    }

    pub fn voltage_from_pu(&self, bus: usize, pu: f64) -> f64 {
        pu * self.buses[bus].nominal_voltage_v
    }
}

fn finite(values: &[f64], what: impl FnOnce() -> String) -> Result<(), NetworkError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NetworkError::NonFinite(what()))
    }
}

/// Validates a parsed description and converts it to per-unit.
pub fn build_network(desc: &NetworkDescription) -> Result<NetworkModel, NetworkError> {
    if !(desc.base_power_kva.is_finite() && desc.base_power_kva > 0.0) {
        return Err(NetworkError::NonPositiveBase);
    }
    let base = PerUnitBase {
        power_va: desc.base_power_kva * 1e3,
    };

    let mut seen = BTreeSet::new();
    let mut slack = None;
    for bus in &desc.buses {
        if !seen.insert(bus.id) {
            return Err(NetworkError::DuplicateBusId(bus.id));
        }
        finite(&[bus.nominal_voltage_v], || format!("bus {}", bus.id))?;
        if bus.nominal_voltage_v <= 0.0 {
            return Err(NetworkError::NonPositiveNominalVoltage(bus.id));
        }
        if bus.kind == BusKind::Slack {
            if slack.is_some() {
                return Err(NetworkError::MultipleSlackBuses);
            }
            slack = Some(bus.clone());
        }
    }
    let slack = slack.ok_or(NetworkError::MissingSlack)?;

    let mut buses = vec![Bus {
        id: slack.id,
        kind: BusKind::Slack,
        nominal_voltage_v: slack.nominal_voltage_v,
    }];
    let mut rest: Vec<&BusSpec> = desc.buses.iter().filter(|b| b.id != slack.id).collect();
    rest.sort_by_key(|b| b.id);
    buses.extend(rest.into_iter().map(|b| Bus {
        id: b.id,
        kind: b.kind,
        nominal_voltage_v: b.nominal_voltage_v,
    }));
    let index: BTreeMap<BusId, usize> = buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();

    let mut branches = Vec::with_capacity(desc.branches.len());
    for br in &desc.branches {
        let (from, to) = (br.from, br.to);
        finite(&[br.resistance_ohm, br.reactance_ohm], || {
            format!("branch {from}-{to}")
        })?;
        let lookup = |bus: BusId| {
            index.get(&bus).copied().ok_or_else(|| NetworkError::UnknownBus {
                element: format!("branch {from}-{to}"),
                bus,
            })
        };
        let (fi, ti) = (lookup(from)?, lookup(to)?);
        if fi == ti {
            return Err(NetworkError::SelfLoop { from, to });
        }
        if br.resistance_ohm < 0.0 {
            return Err(NetworkError::NegativeResistance { from, to });
        }
        if br.resistance_ohm.hypot(br.reactance_ohm) == 0.0 {
            return Err(NetworkError::ZeroImpedance { from, to });
        }
        let v_from = buses[fi].nominal_voltage_v;
        if (v_from - buses[ti].nominal_voltage_v).abs() > 1e-9 * v_from {
            return Err(NetworkError::VoltageLevelMismatch { from, to });
        }
        branches.push(Branch {
            from: fi,
            to: ti,
            r: base.impedance_to_pu(br.resistance_ohm, v_from),
            x: base.impedance_to_pu(br.reactance_ohm, v_from),
        });
    }

    // Connectivity from the slack.
    let mut adjacency = vec![Vec::new(); buses.len()];
    for br in &branches {
        adjacency[br.from].push(br.to);
        adjacency[br.to].push(br.from);
    }
    let mut reached = vec![false; buses.len()];
    reached[0] = true;
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        for &j in &adjacency[i] {
            if !reached[j] {
                reached[j] = true;
                queue.push_back(j);
            }
        }
    }
    let unreachable: Vec<BusId> = buses
        .iter()
        .zip(&reached)
        .filter(|(_, &r)| !r)
        .map(|(b, _)| b.id)
        .collect();
    if !unreachable.is_empty() {
        return Err(NetworkError::Disconnected(unreachable));
    }

    Ok(NetworkModel {
        name: desc.name.clone(),
        base,
        buses,
        branches,
        index,
    })
}

/// Controllable flexibility-providing unit. Limits in W / var.
#[derive(Debug, Clone, PartialEq)]
pub struct Fpu {
    pub name: String,
    pub bus: usize,
    pub p_min_w: f64,
    pub p_max_w: f64,
    pub q_min_var: f64,
    pub q_max_var: f64,
}

/// Legacy inverter with fixed active output and local Q(V) droop.
#[derive(Debug, Clone, PartialEq)]
pub struct DroopInverter {
    pub name: String,
    pub bus: usize,
    pub rating_va: f64,
    pub p_w: f64,
    /// Curve in per-unit of the system power base.
    pub curve: DroopCurve,
}

/// Fixed consumption (positive = drawn from the grid).
#[derive(Debug, Clone, PartialEq)]
pub struct Load {
    pub name: String,
    pub bus: usize,
    pub p_w: f64,
    pub q_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvCharger {
    pub name: String,
    pub bus: usize,
    pub max_charge_w: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeviceSet {
    pub controllables: Vec<Fpu>,
    pub legacy: Vec<DroopInverter>,
    pub loads: Vec<Load>,
    pub ev_points: Vec<EvCharger>,
}

/// Box limits on a setpoint vector, per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SetpointLimits {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SetpointLimits {
    pub fn contains(&self, u: &SetpointVector) -> bool {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&x, (&lo, &hi))| lo <= x && x <= hi)
    }

    pub fn clamp(&self, u: &SetpointVector) -> SetpointVector {
        SetpointVector::from_vec(
            u.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(&x, (&lo, &hi))| x.clamp(lo, hi))
                .collect(),
        )
    }
}

impl DeviceSet {
    pub fn from_description(
        desc: &NetworkDescription,
        net: &NetworkModel,
    ) -> Result<Self, DeviceError> {
        let base = net.base();
        let mut names = BTreeSet::new();
        let mut set = DeviceSet::default();
        for dev in &desc.devices {
            let name = dev.name().to_string();
            if !names.insert(name.clone()) {
                return Err(DeviceError::DuplicateName(name));
            }
            let bus = net.bus_index(dev.bus()).ok_or_else(|| DeviceError::UnknownBus {
                device: name.clone(),
                bus: dev.bus(),
            })?;
            if bus == 0 {
                return Err(DeviceError::OnSlackBus { device: name });
            }
            let invalid = |what| DeviceError::InvalidLimits {
                device: name.clone(),
                what,
            };
            match dev {
                DeviceSpec::Fpu {
                    p_min_kw,
                    p_max_kw,
                    q_min_kvar,
                    q_max_kvar,
                    ..
                } => {
                    let all = [*p_min_kw, *p_max_kw, *q_min_kvar, *q_max_kvar];
                    if all.iter().any(|v| !v.is_finite()) {
                        return Err(invalid("non-finite limit"));
                    }
                    if p_min_kw > p_max_kw {
                        return Err(invalid("p_min exceeds p_max"));
                    }
                    if q_min_kvar > q_max_kvar {
                        return Err(invalid("q_min exceeds q_max"));
                    }
                    set.controllables.push(Fpu {
                        name,
                        bus,
                        p_min_w: p_min_kw * 1e3,
                        p_max_w: p_max_kw * 1e3,
                        q_min_var: q_min_kvar * 1e3,
                        q_max_var: q_max_kvar * 1e3,
                    });
                }
                DeviceSpec::Droop {
                    rating_kva,
                    p_kw,
                    params,
                    ..
                } => {
                    if !(rating_kva.is_finite() && *rating_kva > 0.0) {
                        return Err(invalid("rating must be positive"));
                    }
                    if !p_kw.is_finite() || p_kw.abs() > *rating_kva {
                        return Err(invalid("active power exceeds rating"));
                    }
                    let rating_pu = base.kw_to_pu(*rating_kva);
                    let default = DroopCurve::for_rating(rating_pu);
                    let curve = DroopCurve::new(
                        params.v_lo_v.map(|v| net.voltage_to_pu(bus, v)).unwrap_or(default.v_lo),
                        params.v_db_lo_v.map(|v| net.voltage_to_pu(bus, v)).unwrap_or(default.v_db_lo),
                        params.v_db_hi_v.map(|v| net.voltage_to_pu(bus, v)).unwrap_or(default.v_db_hi),
                        params.v_hi_v.map(|v| net.voltage_to_pu(bus, v)).unwrap_or(default.v_hi),
                        params
                            .q_max_fraction
                            .map(|f| f * rating_pu)
                            .unwrap_or(default.q_max),
                    )
                    .map_err(|source| DeviceError::Droop {
                        device: name.clone(),
                        source,
                    })?;
                    if curve.q_max > rating_pu {
                        return Err(invalid("q_max exceeds rating"));
                    }
                    set.legacy.push(DroopInverter {
                        name,
                        bus,
                        rating_va: rating_kva * 1e3,
                        p_w: p_kw * 1e3,
                        curve,
                    });
                }
                DeviceSpec::Load { p_kw, q_kvar, .. } => {
                    if !(p_kw.is_finite() && q_kvar.is_finite()) {
                        return Err(invalid("non-finite load"));
                    }
                    set.loads.push(Load {
                        name,
                        bus,
                        p_w: p_kw * 1e3,
                        q_var: q_kvar * 1e3,
                    });
                }
                DeviceSpec::Ev { max_kw, .. } => {
                    if !(max_kw.is_finite() && *max_kw >= 0.0) {
                        return Err(invalid("max charge power must be non-negative"));
                    }
                    set.ev_points.push(EvCharger {
                        name,
                        bus,
                        max_charge_w: max_kw * 1e3,
                    });
                }
            }
        }
        Ok(set)
    }

    /// Setpoint dimension `p = 2 * |controllables|`.
    pub fn setpoint_len(&self) -> usize {
        2 * self.controllables.len()
    }

    pub fn limits(&self, base: PerUnitBase) -> SetpointLimits {
        let mut lower = Vec::with_capacity(self.setpoint_len());
        let mut upper = Vec::with_capacity(self.setpoint_len());
        for f in &self.controllables {
            lower.push(base.power_to_pu(f.p_min_w));
            lower.push(base.power_to_pu(f.q_min_var));
            upper.push(base.power_to_pu(f.p_max_w));
            upper.push(base.power_to_pu(f.q_max_var));
        }
        SetpointLimits { lower, upper }
    }

    pub fn load_index(&self, name: &str) -> Option<usize> {
        self.loads.iter().position(|l| l.name == name)
    }

    pub fn ev_index(&self, name: &str) -> Option<usize> {
        self.ev_points.iter().position(|e| e.name == name)
    }

    /// Exogenous state with file loads, idle chargers, zero droop output.
    pub fn nominal_exogenous(&self, base: PerUnitBase, slack_v: f64) -> Exogenous {
        Exogenous {
            slack_v,
            loads: self
                .loads
                .iter()
                .map(|l| (base.power_to_pu(l.p_w), base.power_to_pu(l.q_var)))
                .collect(),
            ev: vec![0.0; self.ev_points.len()],
            legacy_q: vec![0.0; self.legacy.len()],
        }
    }

    /// Per-bus complex injections `(P, Q)` in p.u. (positive = into the grid).
    pub fn injections(
        &self,
        net: &NetworkModel,
        u: &SetpointVector,
        exo: &Exogenous,
    ) -> Vec<(f64, f64)> {
        debug_assert_eq!(u.len(), self.setpoint_len());
        let base = net.base();
        let mut inj = vec![(0.0, 0.0); net.bus_count()];
        for (i, f) in self.controllables.iter().enumerate() {
            inj[f.bus].0 += u.p(i);
            inj[f.bus].1 += u.q(i);
        }
        for (k, inv) in self.legacy.iter().enumerate() {
            inj[inv.bus].0 += base.power_to_pu(inv.p_w);
            inj[inv.bus].1 += exo.legacy_q[k];
        }
        for (l, &(p, q)) in self.loads.iter().zip(&exo.loads) {
            inj[l.bus].0 -= p;
            inj[l.bus].1 -= q;
        }
        for (e, &p) in self.ev_points.iter().zip(&exo.ev) {
            inj[e.bus].0 += p;
        }
        inj
    }
}

/// Everything other than the controllable setpoints that shapes a power
/// flow: slack voltage, load levels, EV charging and legacy droop output.
#[derive(Debug, Clone, PartialEq)]
pub struct Exogenous {
    /// Slack voltage magnitude, p.u.
    pub slack_v: f64,
    /// Per load `(P, Q)` consumption, p.u.
    pub loads: Vec<(f64, f64)>,
    /// Per charger active injection, p.u. (charging is negative).
    pub ev: Vec<f64>,
    /// Per legacy inverter reactive injection, p.u.
    pub legacy_q: Vec<f64>,
}
