//! Text formats for network and scenario files.
//!
//! Both formats are line oriented. A header of `key = value` lines is
//! followed by `[section]` blocks of whitespace-separated rows; rows may
//! end in `key=value` options. Lines starting with `#` are comments.
//! All quantities are in kW, kvar, V, Ω and seconds.
//!
//! Network file:
//!
//! ```text
//! format = 1
//! name = lab_feeder
//! base_power_kva = 100
//!
//! [buses]
//! # id type v_nom_v
//! 1 slack 400
//! 2 pq 400
//!
//! [branches]
//! # from to r_ohm x_ohm
//! 1 2 0.03 0.012
//!
//! [devices]
//! # kind name bus key=value ...
//! fpu pv1 2 p_min_kw=0 p_max_kw=15 q_min_kvar=-10 q_max_kvar=10
//! droop inv 2 rating_kva=10 p_kw=2
//! load l2 2 p_kw=1.5 q_kvar=0.3
//! ev ev1 2 max_kw=22
//! ```
//!
//! `droop` rows also accept `v_lo_v`, `v_db_lo_v`, `v_db_hi_v`, `v_hi_v`
//! and `q_max_fraction`.
//!
//! Scenario file:
//!
//! ```text
//! format = 1
//! name = exp
//! duration_s = 900
//! sample_s = 5
//! slack_v = 400
//!
//! [events]
//! # time_s kind [target] key=value ...
//! 0 set_flexibility p_kw=-2
//! 470 ev_charge_start ev1 p_kw=-14
//! 600 ev_charge_stop ev1
//! 650 slack_voltage_change v_v=402
//! 700 load_change l3 p_kw=2 q_kvar=0.4
//! ```
//!
//! `slack_v` is optional. Events must be sorted by time; equal times
//! fire in file order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::network::{BranchSpec, BusKind, BusSpec, DeviceSpec, DroopParams, NetworkDescription};
use crate::scenario::{EventKind, Scenario, ScenarioEvent};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{location}line {line}: {field}: {message}")]
pub struct FormatError {
    /// `"path: "` when parsed from a file, empty otherwise.
    pub location: String,
    pub line: usize,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoadError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Format(#[from] FormatError),
}

fn err(line: usize, field: &str, message: impl Into<String>) -> FormatError {
    FormatError {
        location: String::new(),
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

struct Row<'a> {
    line: usize,
    section: Option<&'static str>,
    text: &'a str,
}

/// Splits a file into header pairs and section rows.
fn lines<'a>(
    src: &'a str,
    sections: &[&'static str],
) -> Result<(Vec<(usize, String, String)>, Vec<Row<'a>>), FormatError> {
    let mut header = Vec::new();
    let mut rows = Vec::new();
    let mut section: Option<&'static str> = None;
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        if let Some(name) = text.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(line, "section", "missing ']'"))?;
            if !sections.contains(&name) {
                return Err(err(line, "section", format!("unknown section [{name}]")));
            }
            section = Some(sections[sections.iter().position(|s| *s == name).expect("found")]);
            continue;
        }
        match section {
            None => {
                let (k, v) = text
                    .split_once('=')
                    .ok_or_else(|| err(line, "header", "expected key = value"))?;
                header.push((line, k.trim().to_string(), v.trim().to_string()));
            }
            Some(_) => rows.push(Row { line, section, text }),
        }
    }
    Ok((header, rows))
}

fn number(line: usize, field: &str, s: &str) -> Result<f64, FormatError> {
    let v: f64 = s
        .parse()
        .map_err(|_| err(line, field, format!("invalid number '{s}'")))?;
    if !v.is_finite() {
        return Err(err(line, field, format!("non-finite number '{s}'")));
    }
    Ok(v)
}

fn identifier(line: usize, field: &str, s: &str) -> Result<String, FormatError> {
    if s.is_empty() || !s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(err(line, field, format!("invalid name '{s}'")));
    }
    Ok(s.to_string())
}

fn bus_id(line: usize, field: &str, s: &str) -> Result<u32, FormatError> {
    s.parse()
        .map_err(|_| err(line, field, format!("invalid bus id '{s}'")))
}

/// `key=value` options of one row; every key must be consumed.
struct Options {
    line: usize,
    pairs: Vec<(String, String, bool)>,
}

impl Options {
    fn parse(line: usize, tokens: &[&str]) -> Result<Self, FormatError> {
        let mut pairs: Vec<(String, String, bool)> = Vec::new();
        for t in tokens {
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| err(line, t, "expected key=value"))?;
            if pairs.iter().any(|(pk, _, _)| pk == k) {
                return Err(err(line, k, "duplicate key"));
            }
            pairs.push((k.to_string(), v.to_string(), false));
        }
        Ok(Self { line, pairs })
    }

    fn optional(&mut self, key: &str) -> Result<Option<f64>, FormatError> {
        match self.pairs.iter_mut().find(|(k, _, _)| k == key) {
            Some((_, v, used)) => {
                *used = true;
                number(self.line, key, v).map(Some)
            }
            None => Ok(None),
        }
    }

    fn required(&mut self, key: &str) -> Result<f64, FormatError> {
        self.optional(key)?
            .ok_or_else(|| err(self.line, key, "missing required key"))
    }

    fn finish(self) -> Result<(), FormatError> {
        match self.pairs.iter().find(|(_, _, used)| !used) {
            Some((k, _, _)) => Err(err(self.line, k, "unknown key")),
            None => Ok(()),
        }
    }
}

struct Header {
    pairs: Vec<(usize, String, String)>,
    used: Vec<bool>,
}

impl Header {
    fn new(pairs: Vec<(usize, String, String)>) -> Result<Self, FormatError> {
        for (i, (line, k, _)) in pairs.iter().enumerate() {
            if pairs[..i].iter().any(|(_, pk, _)| pk == k) {
                return Err(err(*line, k, "duplicate key"));
            }
        }
        let used = vec![false; pairs.len()];
        Ok(Self { pairs, used })
    }

    fn get(&mut self, key: &str) -> Option<(usize, String)> {
        let i = self.pairs.iter().position(|(_, k, _)| k == key)?;
        self.used[i] = true;
        Some((self.pairs[i].0, self.pairs[i].2.clone()))
    }

    fn required(&mut self, key: &str) -> Result<(usize, String), FormatError> {
        self.get(key)
            .ok_or_else(|| err(0, key, "missing header key"))
    }

    fn version(&mut self) -> Result<(), FormatError> {
        let (line, v) = self.required("format")?;
        if v != FORMAT_VERSION.to_string() {
            return Err(err(line, "format", format!("unsupported version '{v}'")));
        }
        Ok(())
    }

    fn finish(self) -> Result<(), FormatError> {
        match self.pairs.iter().zip(&self.used).find(|(_, u)| !**u) {
            Some(((line, k, _), _)) => Err(err(*line, k, "unknown key")),
            None => Ok(()),
        }
    }
}

pub fn parse_network(src: &str) -> Result<NetworkDescription, FormatError> {
    let (header, rows) = lines(src, &["buses", "branches", "devices"])?;
    let mut header = Header::new(header)?;
    header.version()?;
    let (line, name) = header.required("name")?;
    let name = identifier(line, "name", &name)?;
    let (line, base) = header.required("base_power_kva")?;
    let base_power_kva = number(line, "base_power_kva", &base)?;
    header.finish()?;

    let mut desc = NetworkDescription {
        name,
        base_power_kva,
        buses: Vec::new(),
        branches: Vec::new(),
        devices: Vec::new(),
    };
    for row in rows {
        let line = row.line;
        let t: Vec<&str> = row.text.split_whitespace().collect();
        match row.section {
            Some("buses") => {
                if t.len() != 3 {
                    return Err(err(line, "bus", "expected: id type v_nom_v"));
                }
                let kind = match t[1] {
                    "slack" => BusKind::Slack,
                    "pq" => BusKind::Pq,
                    other => return Err(err(line, "type", format!("unknown bus type '{other}'"))),
                };
                desc.buses.push(BusSpec {
                    id: bus_id(line, "id", t[0])?,
                    kind,
                    nominal_voltage_v: number(line, "v_nom_v", t[2])?,
                });
            }
            Some("branches") => {
                if t.len() != 4 {
                    return Err(err(line, "branch", "expected: from to r_ohm x_ohm"));
                }
                desc.branches.push(BranchSpec {
                    from: bus_id(line, "from", t[0])?,
                    to: bus_id(line, "to", t[1])?,
                    resistance_ohm: number(line, "r_ohm", t[2])?,
                    reactance_ohm: number(line, "x_ohm", t[3])?,
                });
            }
            _ => {
                if t.len() < 3 {
                    return Err(err(line, "device", "expected: kind name bus key=value ..."));
                }
                let name = identifier(line, "name", t[1])?;
                let bus = bus_id(line, "bus", t[2])?;
                let mut o = Options::parse(line, &t[3..])?;
                let dev = match t[0] {
                    "fpu" => DeviceSpec::Fpu {
                        name,
                        bus,
                        p_min_kw: o.required("p_min_kw")?,
                        p_max_kw: o.required("p_max_kw")?,
                        q_min_kvar: o.required("q_min_kvar")?,
                        q_max_kvar: o.required("q_max_kvar")?,
                    },
                    "droop" => DeviceSpec::Droop {
                        name,
                        bus,
                        rating_kva: o.required("rating_kva")?,
                        p_kw: o.required("p_kw")?,
                        params: DroopParams {
                            v_lo_v: o.optional("v_lo_v")?,
                            v_db_lo_v: o.optional("v_db_lo_v")?,
                            v_db_hi_v: o.optional("v_db_hi_v")?,
                            v_hi_v: o.optional("v_hi_v")?,
                            q_max_fraction: o.optional("q_max_fraction")?,
                        },
                    },
                    "load" => DeviceSpec::Load {
                        name,
                        bus,
                        p_kw: o.required("p_kw")?,
                        q_kvar: o.required("q_kvar")?,
                    },
                    "ev" => DeviceSpec::Ev {
                        name,
                        bus,
                        max_kw: o.required("max_kw")?,
                    },
                    other => return Err(err(line, "kind", format!("unknown device kind '{other}'"))),
                };
                o.finish()?;
                desc.devices.push(dev);
            }
        }
    }
    Ok(desc)
}

pub fn serialize_network(desc: &NetworkDescription) -> String {
    let mut s = String::new();
    s.push_str("# ofo-flex network\n");
    let _ = writeln!(s, "format = {FORMAT_VERSION}");
    let _ = writeln!(s, "name = {}", desc.name);
    let _ = writeln!(s, "base_power_kva = {}", desc.base_power_kva);
    s.push_str("\n[buses]\n# id type v_nom_v\n");
    for b in &desc.buses {
        let _ = writeln!(s, "{} {} {}", b.id, b.kind.as_str(), b.nominal_voltage_v);
    }
    s.push_str("\n[branches]\n# from to r_ohm x_ohm\n");
    for b in &desc.branches {
        let _ = writeln!(s, "{} {} {} {}", b.from, b.to, b.resistance_ohm, b.reactance_ohm);
    }
    s.push_str("\n[devices]\n# kind name bus key=value ...\n");
    for d in &desc.devices {
        match d {
            DeviceSpec::Fpu {
                name,
                bus,
                p_min_kw,
                p_max_kw,
                q_min_kvar,
                q_max_kvar,
            } => {
                let _ = writeln!(
                    s,
                    "fpu {name} {bus} p_min_kw={p_min_kw} p_max_kw={p_max_kw} q_min_kvar={q_min_kvar} q_max_kvar={q_max_kvar}"
                );
            }
            DeviceSpec::Droop {
                name,
                bus,
                rating_kva,
                p_kw,
                params,
            } => {
                let _ = write!(s, "droop {name} {bus} rating_kva={rating_kva} p_kw={p_kw}");
                let opts = [
                    ("v_lo_v", params.v_lo_v),
                    ("v_db_lo_v", params.v_db_lo_v),
                    ("v_db_hi_v", params.v_db_hi_v),
                    ("v_hi_v", params.v_hi_v),
                    ("q_max_fraction", params.q_max_fraction),
                ];
                for (k, v) in opts {
                    if let Some(v) = v {
                        let _ = write!(s, " {k}={v}");
                    }
                }
                s.push('\n');
            }
            DeviceSpec::Load {
                name,
                bus,
                p_kw,
                q_kvar,
            } => {
                let _ = writeln!(s, "load {name} {bus} p_kw={p_kw} q_kvar={q_kvar}");
            }
            DeviceSpec::Ev { name, bus, max_kw } => {
                let _ = writeln!(s, "ev {name} {bus} max_kw={max_kw}");
            }
        }
    }
    s
}

pub fn parse_scenario(src: &str) -> Result<Scenario, FormatError> {
    let (header, rows) = lines(src, &["events"])?;
    let mut header = Header::new(header)?;
    header.version()?;
    let (line, name) = header.required("name")?;
    let name = identifier(line, "name", &name)?;
    let (line, v) = header.required("duration_s")?;
    let duration_s = number(line, "duration_s", &v)?;
    if duration_s < 0.0 {
        return Err(err(line, "duration_s", "negative duration"));
    }
    let (line, v) = header.required("sample_s")?;
    let sample_s = number(line, "sample_s", &v)?;
    if sample_s <= 0.0 {
        return Err(err(line, "sample_s", "sampling interval must be positive"));
    }
    let slack_v_v = match header.get("slack_v") {
        Some((line, v)) => {
            let v = number(line, "slack_v", &v)?;
            if v <= 0.0 {
                return Err(err(line, "slack_v", "voltage must be positive"));
            }
            Some(v)
        }
        None => None,
    };
    header.finish()?;

    let mut events: Vec<ScenarioEvent> = Vec::new();
    for row in rows {
        let line = row.line;
        let t: Vec<&str> = row.text.split_whitespace().collect();
        if t.len() < 2 {
            return Err(err(line, "event", "expected: time_s kind [target] key=value ..."));
        }
        let time_s = number(line, "time_s", t[0])?;
        if time_s < 0.0 {
            return Err(err(line, "time_s", "negative event time"));
        }
        if events.last().is_some_and(|e| e.time_s > time_s) {
            return Err(err(line, "time_s", "events not sorted by time"));
        }
        let target = |i: usize| -> Result<String, FormatError> {
            let s = t.get(i).ok_or_else(|| err(line, "target", "missing target"))?;
            identifier(line, "target", s)
        };
        let kind = match t[1] {
            "set_flexibility" => {
                let mut o = Options::parse(line, &t[2..])?;
                let k = EventKind::SetFlexibility {
                    p_kw: o.required("p_kw")?,
                };
                o.finish()?;
                k
            }
            "ev_charge_start" => {
                let target = target(2)?;
                let mut o = Options::parse(line, &t[3..])?;
                let p_kw = o.required("p_kw")?;
                o.finish()?;
                if p_kw > 0.0 {
                    return Err(err(line, "p_kw", "charging power must be negative (consumption)"));
                }
                EventKind::EvChargeStart { target, p_kw }
            }
            "ev_charge_stop" => {
                let target = target(2)?;
                Options::parse(line, &t[3..])?.finish()?;
                EventKind::EvChargeStop { target }
            }
            "slack_voltage_change" => {
                let mut o = Options::parse(line, &t[2..])?;
                let v_v = o.required("v_v")?;
                o.finish()?;
                if v_v <= 0.0 {
                    return Err(err(line, "v_v", "voltage must be positive"));
                }
                EventKind::SlackVoltageChange { v_v }
            }
            "load_change" => {
                let target = target(2)?;
                let mut o = Options::parse(line, &t[3..])?;
                let k = EventKind::LoadChange {
                    target,
                    p_kw: o.required("p_kw")?,
                    q_kvar: o.required("q_kvar")?,
                };
                o.finish()?;
                k
            }
            other => return Err(err(line, "kind", format!("unknown event kind '{other}'"))),
        };
        events.push(ScenarioEvent { time_s, kind });
    }
    Ok(Scenario {
        name,
        duration_s,
        sample_s,
        slack_v_v,
        events,
    })
}

pub fn serialize_scenario(sc: &Scenario) -> String {
    let mut s = String::new();
    s.push_str("# ofo-flex scenario\n");
    let _ = writeln!(s, "format = {FORMAT_VERSION}");
    let _ = writeln!(s, "name = {}", sc.name);
    let _ = writeln!(s, "duration_s = {}", sc.duration_s);
    let _ = writeln!(s, "sample_s = {}", sc.sample_s);
    if let Some(v) = sc.slack_v_v {
        let _ = writeln!(s, "slack_v = {v}");
    }
    s.push_str("\n[events]\n# time_s kind [target] key=value ...\n");
    for e in &sc.events {
        let t = e.time_s;
        let kw = e.kind.keyword();
        let _ = match &e.kind {
            EventKind::SetFlexibility { p_kw } => writeln!(s, "{t} {kw} p_kw={p_kw}"),
            EventKind::EvChargeStart { target, p_kw } => writeln!(s, "{t} {kw} {target} p_kw={p_kw}"),
            EventKind::EvChargeStop { target } => writeln!(s, "{t} {kw} {target}"),
            EventKind::SlackVoltageChange { v_v } => writeln!(s, "{t} {kw} v_v={v_v}"),
            EventKind::LoadChange { target, p_kw, q_kvar } => {
                writeln!(s, "{t} {kw} {target} p_kw={p_kw} q_kvar={q_kvar}")
            }
        };
    }
    s
}

fn read(path: &Path) -> Result<String, LoadError> {
    fs::read_to_string(path).map_err(|e| LoadError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn located(path: &Path, mut e: FormatError) -> LoadError {
    e.location = format!("{}: ", path.display());
    LoadError::Format(e)
}

pub fn parse_network_file(path: &Path) -> Result<NetworkDescription, LoadError> {
    parse_network(&read(path)?).map_err(|e| located(path, e))
}

pub fn parse_scenario_file(path: &Path) -> Result<Scenario, LoadError> {
    parse_scenario(&read(path)?).map_err(|e| located(path, e))
}
