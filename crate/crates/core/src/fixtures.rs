//! Bundled network and scenario files, and a seeded random-feeder
//! generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::format::{parse_network, parse_scenario};
use crate::network::{BranchSpec, BusKind, BusSpec, DeviceSpec, NetworkDescription};
use crate::scenario::Scenario;

pub const LAB_FEEDER: &str = include_str!("../data/lab_feeder.net");
pub const EXP_A: &str = include_str!("../data/exp_a_14p5kw.scn");
pub const EXP_B: &str = include_str!("../data/exp_b_ev_disturbance.scn");

/// Every bundled file as `(file name, contents)`.
pub const BUNDLED: [(&str, &str); 3] = [
    ("lab_feeder.net", LAB_FEEDER),
    ("exp_a_14p5kw.scn", EXP_A),
    ("exp_b_ev_disturbance.scn", EXP_B),
];

pub fn lab_feeder() -> NetworkDescription {
    parse_network(LAB_FEEDER).expect("bundled network parses")
}

pub fn exp_a() -> Scenario {
    parse_scenario(EXP_A).expect("bundled scenario parses")
}

pub fn exp_b() -> Scenario {
    parse_scenario(EXP_B).expect("bundled scenario parses")
}

/// Generator bounds for random radial feeders.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederBounds {
    pub buses: (usize, usize),
    pub segment_m: (f64, f64),
    pub r_ohm_per_km: (f64, f64),
    pub x_ohm_per_km: (f64, f64),
    pub load_kw: (f64, f64),
    pub load_pf_q_ratio: (f64, f64),
    pub fpus: (usize, usize),
    pub fpu_p_kw: f64,
    pub fpu_q_kvar: f64,
    /// Fraction of total FPU active capacity the request calls for.
    pub request_share: (f64, f64),
}

impl Default for FeederBounds {
    fn default() -> Self {
        Self {
            buses: (3, 8),
            segment_m: (50.0, 150.0),
            r_ohm_per_km: (0.1, 0.3),
            x_ohm_per_km: (0.07, 0.1),
            load_kw: (0.0, 3.0),
            load_pf_q_ratio: (0.0, 0.3),
            fpus: (1, 3),
            fpu_p_kw: 15.0,
            fpu_q_kvar: 10.0,
            request_share: (0.2, 0.7),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeeder {
    pub seed: u64,
    pub description: NetworkDescription,
    /// PCC import request, kW.
    pub p_set_kw: f64,
}

/// Random radial feeder: bus `k` hangs off a uniformly chosen earlier bus.
/// The request ignores losses; callers check feasibility with the oracle.
pub fn random_feeder(seed: u64, bounds: &FeederBounds) -> RandomFeeder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(bounds.buses.0..=bounds.buses.1);
    let buses = (1..=n as u32)
        .map(|id| BusSpec {
            id,
            kind: if id == 1 { BusKind::Slack } else { BusKind::Pq },
            nominal_voltage_v: 400.0,
        })
        .collect();
    let branches = (2..=n as u32)
        .map(|id| {
            let len_km = rng.gen_range(bounds.segment_m.0..=bounds.segment_m.1) / 1000.0;
            BranchSpec {
                from: rng.gen_range(1..id),
                to: id,
                resistance_ohm: len_km * rng.gen_range(bounds.r_ohm_per_km.0..=bounds.r_ohm_per_km.1),
                reactance_ohm: len_km * rng.gen_range(bounds.x_ohm_per_km.0..=bounds.x_ohm_per_km.1),
            }
        })
        .collect();

    let mut devices = Vec::new();
    let mut load_kw = 0.0;
    for id in 2..=n as u32 {
        let p = rng.gen_range(bounds.load_kw.0..=bounds.load_kw.1);
        let q = p * rng.gen_range(bounds.load_pf_q_ratio.0..=bounds.load_pf_q_ratio.1);
        load_kw += p;
        devices.push(DeviceSpec::Load {
            name: format!("load{id}"),
            bus: id,
            p_kw: p,
            q_kvar: q,
        });
    }
    let fpus = rng.gen_range(bounds.fpus.0..=bounds.fpus.1).min(n - 1);
    for k in 0..fpus {
        devices.push(DeviceSpec::Fpu {
            name: format!("fpu{k}"),
            bus: rng.gen_range(2..=n as u32),
            p_min_kw: 0.0,
            p_max_kw: bounds.fpu_p_kw,
            q_min_kvar: -bounds.fpu_q_kvar,
            q_max_kvar: bounds.fpu_q_kvar,
        });
    }
    let share = rng.gen_range(bounds.request_share.0..=bounds.request_share.1);
    let p_set_kw = load_kw - share * fpus as f64 * bounds.fpu_p_kw;
    RandomFeeder {
        seed,
        description: NetworkDescription {
            name: format!("random_{seed}"),
            base_power_kva: 100.0,
            buses,
            branches,
            devices,
        },
        p_set_kw,
    }
}
