//! Command-line front end.
//!
//! Exit codes: 0 success, 1 input error, 2 runtime failure. Every failure
//! writes exactly one line to stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::batch::{batch_map, BatchMode};
use crate::controller::{objective, ControllerConfig};
use crate::fixtures;
use crate::format::{parse_network, parse_network_file, parse_scenario, parse_scenario_file};
use crate::harness::{
    controller_config, initial_slack, run_closed_loop, summarize, KpiTolerances, TelemetryLog,
};
use crate::network::{build_network, DeviceSet, NetworkDescription, NetworkModel};
use crate::oracle::{reference_opf, OracleConfig};
use crate::plant::PlantConfig;
use crate::scenario::Scenario;
use crate::setpoint::SetpointVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Run,
    CompareOracle,
    SweepAlpha,
}

/// Online feedback optimization of PCC flexibility on a distribution feeder.
#[derive(Debug, Clone, Parser)]
#[command(name = "ofo-flex", version)]
pub struct RunConfig {
    /// Network file, or the bundled name `lab_feeder`.
    #[arg(long, default_value = "lab_feeder")]
    pub network: String,
    /// Scenario file, or a bundled name (`exp_a_14p5kw`, `exp_b_ev_disturbance`).
    #[arg(long)]
    pub scenario: String,
    #[arg(long, value_enum, default_value = "run")]
    pub mode: Mode,
    /// Controller step size.
    #[arg(long, default_value_t = ControllerConfig::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Penalty weight of the softened PCC row.
    #[arg(long, default_value_t = ControllerConfig::DEFAULT_RHO)]
    pub rho: f64,
    /// Voltage band half-width as a fraction of nominal.
    #[arg(long, default_value_t = ControllerConfig::DEFAULT_BAND)]
    pub v_band: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, env = "OFO_FLEX_OUT", default_value = ".")]
    pub out: PathBuf,
    /// Samples between a command and its realization.
    #[arg(long, default_value_t = 1)]
    pub actuation_delay: usize,
    /// Samples between the grid state and the controller seeing it.
    #[arg(long, default_value_t = 0)]
    pub measurement_delay: usize,
    /// Voltage measurement noise σ, V.
    #[arg(long, default_value_t = 0.0)]
    pub noise_v: f64,
    /// PCC power measurement noise σ, kW.
    #[arg(long, default_value_t = 0.0)]
    pub noise_p: f64,
    /// Step sizes for `sweep-alpha`.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.6")]
    pub alphas: Vec<f64>,
    /// Run batches on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Input(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Runtime(m) => m,
        }
    }
}

fn one_line(s: &str) -> String {
    s.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ")
}

fn load_network(arg: &str) -> Result<NetworkDescription, Failure> {
    if arg == "lab_feeder" && !Path::new(arg).exists() {
        return parse_network(fixtures::LAB_FEEDER).map_err(|e| Failure::Input(e.to_string()));
    }
    parse_network_file(Path::new(arg)).map_err(|e| Failure::Input(e.to_string()))
}

fn load_scenario(arg: &str) -> Result<Scenario, Failure> {
    if !Path::new(arg).exists() {
        let bundled = match arg {
            "exp_a_14p5kw" => Some(fixtures::EXP_A),
            "exp_b_ev_disturbance" => Some(fixtures::EXP_B),
            _ => None,
        };
        if let Some(src) = bundled {
            return parse_scenario(src).map_err(|e| Failure::Input(e.to_string()));
        }
    }
    parse_scenario_file(Path::new(arg)).map_err(|e| Failure::Input(e.to_string()))
}

fn check_ranges(cfg: &RunConfig) -> Result<(), Failure> {
    let bad = |m: &str| Err(Failure::Input(m.to_string()));
    if !(cfg.alpha > 0.0 && cfg.alpha <= 10.0) {
        return bad("--alpha must be in (0, 10]");
    }
    if !(cfg.rho > 0.0 && cfg.rho.is_finite()) {
        return bad("--rho must be positive");
    }
    if !(cfg.v_band > 0.0 && cfg.v_band < 0.2) {
        return bad("--v-band must be in (0, 0.2)");
    }
    if cfg.actuation_delay > 100 || cfg.measurement_delay > 100 {
        return bad("delays must be at most 100 samples");
    }
    if !(cfg.noise_v >= 0.0 && cfg.noise_v.is_finite() && cfg.noise_p >= 0.0 && cfg.noise_p.is_finite()) {
        return bad("noise sigmas must be non-negative");
    }
    if cfg.alphas.is_empty() || cfg.alphas.iter().any(|a| !(*a > 0.0 && *a <= 10.0)) {
        return bad("--alphas must be in (0, 10]");
    }
    Ok(())
}

struct Setup {
    net: NetworkModel,
    devices: DeviceSet,
    scenario: Scenario,
    ctrl: ControllerConfig,
    plant: PlantConfig,
    u0: SetpointVector,
}

fn setup(cfg: &RunConfig) -> Result<Setup, Failure> {
    check_ranges(cfg)?;
    let desc = load_network(&cfg.network)?;
    let scenario = load_scenario(&cfg.scenario)?;
    scenario.validate().map_err(|e| Failure::Input(format!("{}: {e}", cfg.scenario)))?;
    let net = build_network(&desc).map_err(|e| Failure::Input(format!("{}: {e}", cfg.network)))?;
    let devices =
        DeviceSet::from_description(&desc, &net).map_err(|e| Failure::Input(format!("{}: {e}", cfg.network)))?;
    let u0 = SetpointVector::zeros(devices.controllables.len());
    let slack = initial_slack(&net, &scenario);
    let mut ctrl = controller_config(&net, &devices, &u0, slack).map_err(|e| Failure::Runtime(e.to_string()))?;
    ctrl = ctrl.with_voltage_band(cfg.v_band);
    ctrl.alpha = cfg.alpha;
    ctrl.rho = cfg.rho;
    let base = net.base();
    let plant = PlantConfig {
        actuation_delay: cfg.actuation_delay,
        measurement_delay: cfg.measurement_delay,
        noise_v: cfg.noise_v / net.voltage_from_pu(0, 1.0),
        noise_p: base.kw_to_pu(cfg.noise_p),
        seed: cfg.seed,
        ..PlantConfig::default()
    };
    Ok(Setup {
        net,
        devices,
        scenario,
        ctrl,
        plant,
        u0,
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::write(dir.join(name), contents)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.join(name).display())))
}

fn run_once(s: &Setup, ctrl: &ControllerConfig) -> Result<TelemetryLog, Failure> {
    run_closed_loop(&s.net, &s.devices, &s.scenario, ctrl, &s.plant, &s.u0)
        .map_err(|e| Failure::Input(e.to_string()))
}

fn tolerances(cfg: &RunConfig) -> KpiTolerances {
    KpiTolerances {
        v_min: 1.0 - cfg.v_band,
        v_max: 1.0 + cfg.v_band,
        ..KpiTolerances::default()
    }
}

fn execute(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), Failure> {
    let s = setup(cfg)?;
    fs::create_dir_all(&cfg.out)
        .map_err(|e| Failure::Input(format!("{}: {e}", cfg.out.display())))?;
    let mode = if cfg.sequential {
        BatchMode::Sequential
    } else {
        BatchMode::Parallel
    };

    if cfg.mode == Mode::SweepAlpha {
        let runs = batch_map(mode, cfg.alphas.clone(), |alpha| {
            let ctrl = ControllerConfig { alpha, ..s.ctrl.clone() };
            run_once(&s, &ctrl).map(|log| (alpha, summarize(&log, &tolerances(cfg)), log.abort))
        });
        let mut text = String::from("# alpha settling_iterations steady_state_error_kw\n");
        for r in runs {
            let (alpha, kpi, abort) = r?;
            let settle = kpi
                .settling
                .map(|st| st.samples.to_string())
                .unwrap_or_else(|| "did_not_settle".into());
            let _ = write!(text, "{alpha} {settle} {}", kpi.steady_state_error_kw);
            if abort.is_some() {
                text.push_str(" aborted");
            }
            text.push('\n');
        }
        write_file(&cfg.out, "sweep.txt", &text)?;
        let _ = stdout.write_all(text.as_bytes());
        return Ok(());
    }

    let log = run_once(&s, &s.ctrl)?;
    let kpi = summarize(&log, &tolerances(cfg));
    write_file(&cfg.out, "telemetry.csv", &log.to_csv_string())?;
    let report = kpi.render(&log);
    write_file(&cfg.out, "kpi.txt", &report)?;
    let _ = stdout.write_all(report.as_bytes());
    if let Some(reason) = &log.abort {
        return Err(Failure::Runtime(format!("run aborted: {reason}")));
    }

    if cfg.mode == Mode::CompareOracle {
        let last = log.rows.last().expect("non-empty run");
        let oracle_cfg = OracleConfig {
            p_set: last.p_set,
            v_min: 1.0 - cfg.v_band,
            v_max: 1.0 + cfg.v_band,
            exogenous: last.exogenous.clone(),
            seed: cfg.seed,
            mode,
            ..OracleConfig::new(&s.net, &s.devices, last.p_set, last.exogenous.slack_v)
        };
        let opt = reference_opf(&s.net, &s.devices, &oracle_cfg)
            .map_err(|e| Failure::Runtime(format!("oracle: {e}")))?;
        let phi = objective(&last.applied);
        let gap = if opt.objective > 0.0 {
            (phi - opt.objective) / opt.objective
        } else {
            phi - opt.objective
        };
        let mut text = String::new();
        let _ = writeln!(text, "phi = {phi}");
        let _ = writeln!(text, "phi_star = {}", opt.objective);
        let _ = writeln!(text, "relative_gap = {gap}");
        let _ = writeln!(text, "oracle_stationarity = {}", opt.stationarity);
        let _ = writeln!(text, "oracle_converged_restarts = {}", opt.converged_restarts);
        for (i, unit) in s.devices.controllables.iter().enumerate() {
            let kw = |pu: f64| s.net.base().kw_from_pu(pu);
            let _ = writeln!(text, "u_star_p_{}_kw = {}", unit.name, kw(opt.u.p(i)));
            let _ = writeln!(text, "u_star_q_{}_kvar = {}", unit.name, kw(opt.u.q(i)));
        }
        write_file(&cfg.out, "oracle.txt", &text)?;
        let _ = stdout.write_all(text.as_bytes());
    }
    Ok(())
}

/// Runs the tool on `args` (including the program name) and returns the
/// exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cfg = match RunConfig::try_parse_from(args) {
        Ok(cfg) => cfg,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let _ = writeln!(stderr, "{}", one_line(&e.render().to_string()));
            return 1;
        }
    };
    match execute(&cfg, stdout) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", one_line(f.message()));
            f.code()
        }
    }
}
