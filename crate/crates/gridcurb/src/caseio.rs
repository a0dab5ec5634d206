//! Line-oriented case format and report emission.
//!
//! A case file is a sectioned text document:
//!
//! ```text
//! [system]    base_mva=100 slack=1
//! [bus]       id kind vmin vmax vset        # kind in {slack,pv,pq}; vset blank for pq
//! [branch]    from to r x b rating          # per-unit; rating in MVA
//! [generator] bus pmin pmax qmin qmax pset
//! [load]      bus p q                       # per-unit demand
//! [facts]     kind from to [pinj qinj1 qinj2 [gll bll]]
//! [study]     key=value lines
//! ```
//!
//! `#` starts a comment. Case numerics are emitted with up to six
//! fractional digits so a parse/emit/parse round trip reproduces the
//! parsed structure exactly; report tables use fixed four-decimal cells.

use std::fmt::Write as _;

use num_complex::Complex64;
use thiserror::Error;

use crate::curtailopf::CurtailmentResult;
use crate::facts::{Bounds, DeviceKind, FactsDevice};
use crate::lindex::StabilityReport;
use crate::netmodel::{self, Branch, Bus, BusKind, Generator, Load, Network};
use crate::powerflow::PowerFlowSolution;
use crate::study::{CellOutcome, StudyMode, StudySpec, SweepResult};

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("network validation failed:\n{0}")]
    Invalid(String),
    #[error("study section: {0}")]
    Study(#[from] crate::study::StudyParseError),
}

fn perr(line: usize, message: impl Into<String>) -> CaseError {
    CaseError::Parse { line, message: message.into() }
}

/// Parse a case document into a validated network plus the optional study
/// specification.
pub fn parse_case(text: &str) -> Result<(Network, Option<StudySpec>), CaseError> {
    let mut section = String::new();
    let mut system: Vec<(usize, String, String)> = Vec::new();
    let mut buses: Vec<Bus> = Vec::new();
    let mut branches: Vec<Branch> = Vec::new();
    let mut generators: Vec<Generator> = Vec::new();
    let mut loads: Vec<Load> = Vec::new();
    let mut devices: Vec<FactsDevice> = Vec::new();
    let mut study_lines: Vec<(usize, String, String)> = Vec::new();
    let mut saw_study = false;

    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| perr(line_no, "unterminated section header"))?;
            section = name.trim().to_ascii_lowercase();
            match section.as_str() {
                "system" | "bus" | "branch" | "generator" | "load" | "facts" | "study" => {}
                other => return Err(perr(line_no, format!("unknown section [{other}]"))),
            }
            if section == "study" {
                saw_study = true;
            }
            continue;
        }
        match section.as_str() {
            "" => return Err(perr(line_no, "data before any section header")),
            "system" => {
                for tok in line.split_whitespace() {
                    let (k, v) = tok
                        .split_once('=')
                        .ok_or_else(|| perr(line_no, format!("expected key=value, got {tok:?}")))?;
                    system.push((line_no, k.to_string(), v.to_string()));
                }
            }
            "bus" => buses.push(parse_bus(line_no, line)?),
            "branch" => branches.push(parse_branch(line_no, line)?),
            "generator" => generators.push(parse_generator(line_no, line)?),
            "load" => loads.push(parse_load(line_no, line)?),
            "facts" => devices.push(parse_facts(line_no, line)?),
            "study" => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| perr(line_no, format!("expected key=value, got {line:?}")))?;
                study_lines.push((line_no, k.trim().to_string(), v.trim().to_string()));
            }
            _ => unreachable!(),
        }
    }

    let mut base_mva = 100.0;
    let mut slack_id: Option<usize> = None;
    for (line_no, k, v) in &system {
        match k.as_str() {
            "base_mva" => {
                base_mva = v
                    .parse()
                    .map_err(|_| perr(*line_no, format!("bad base_mva {v:?}")))?;
            }
            "slack" => {
                slack_id = Some(
                    v.parse()
                        .map_err(|_| perr(*line_no, format!("bad slack bus {v:?}")))?,
                );
            }
            other => return Err(perr(*line_no, format!("unknown system key {other:?}"))),
        }
    }

    // branch ratings arrive in MVA
    for br in &mut branches {
        br.rating /= base_mva;
    }

    if let Some(id) = slack_id {
        match buses.iter().find(|b| b.kind == BusKind::Slack) {
            Some(b) if b.id == id => {}
            Some(b) => {
                return Err(CaseError::Invalid(format!(
                    "[system] slack={id} but bus {} is declared slack",
                    b.id
                )))
            }
            None => {
                return Err(CaseError::Invalid(format!(
                    "[system] slack={id} but no bus is declared slack"
                )))
            }
        }
    }

    let network = Network {
        buses,
        branches,
        generators,
        loads,
        facts_devices: devices,
        base_mva,
    };
    let report = netmodel::validate(&network);
    if !report.is_valid() {
        return Err(CaseError::Invalid(report.violations.join("\n")));
    }

    let study = if saw_study && !study_lines.is_empty() {
        Some(StudySpec::from_lines(&study_lines)?)
    } else {
        None
    };
    Ok((network, study))
}

fn fields(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

fn num(line_no: usize, what: &str, s: &str) -> Result<f64, CaseError> {
    s.parse()
        .map_err(|_| perr(line_no, format!("bad {what} {s:?}")))
}

fn int(line_no: usize, what: &str, s: &str) -> Result<usize, CaseError> {
    s.parse()
        .map_err(|_| perr(line_no, format!("bad {what} {s:?}")))
}

fn parse_bus(line_no: usize, line: &str) -> Result<Bus, CaseError> {
    let f = fields(line);
    if f.len() != 4 && f.len() != 5 {
        return Err(perr(line_no, "bus row needs: id kind vmin vmax [vset]"));
    }
    let kind = match f[1].to_ascii_lowercase().as_str() {
        "slack" => BusKind::Slack,
        "pv" => BusKind::Pv,
        "pq" => BusKind::Pq,
        other => return Err(perr(line_no, format!("unknown bus kind {other:?}"))),
    };
    let v_setpoint = if f.len() == 5 {
        if kind == BusKind::Pq {
            return Err(perr(line_no, "vset not allowed for a pq bus"));
        }
        Some(num(line_no, "vset", f[4])?)
    } else {
        if kind != BusKind::Pq {
            return Err(perr(line_no, format!("{} bus needs a vset column", f[1])));
        }
        None
    };
    Ok(Bus {
        id: int(line_no, "bus id", f[0])?,
        kind,
        v_min: num(line_no, "vmin", f[2])?,
        v_max: num(line_no, "vmax", f[3])?,
        v_setpoint,
    })
}

fn parse_branch(line_no: usize, line: &str) -> Result<Branch, CaseError> {
    let f = fields(line);
    if f.len() != 6 {
        return Err(perr(line_no, "branch row needs: from to r x b rating"));
    }
    let x = num(line_no, "x", f[3])?;
    if x == 0.0 {
        return Err(perr(line_no, "x must be nonzero"));
    }
    Ok(Branch {
        from_bus: int(line_no, "from bus", f[0])?,
        to_bus: int(line_no, "to bus", f[1])?,
        resistance: num(line_no, "r", f[2])?,
        reactance: x,
        charging: num(line_no, "b", f[4])?,
        rating: num(line_no, "rating", f[5])?,
        in_service: true,
    })
}

fn parse_generator(line_no: usize, line: &str) -> Result<Generator, CaseError> {
    let f = fields(line);
    if f.len() != 6 {
        return Err(perr(line_no, "generator row needs: bus pmin pmax qmin qmax pset"));
    }
    Ok(Generator {
        bus: int(line_no, "bus", f[0])?,
        p_min: num(line_no, "pmin", f[1])?,
        p_max: num(line_no, "pmax", f[2])?,
        q_min: num(line_no, "qmin", f[3])?,
        q_max: num(line_no, "qmax", f[4])?,
        p_setpoint: num(line_no, "pset", f[5])?,
    })
}

fn parse_load(line_no: usize, line: &str) -> Result<Load, CaseError> {
    let f = fields(line);
    if f.len() != 3 {
        return Err(perr(line_no, "load row needs: bus p q"));
    }
    Ok(Load {
        bus: int(line_no, "bus", f[0])?,
        p_req: num(line_no, "p", f[1])?,
        q_req: num(line_no, "q", f[2])?,
    })
}

fn parse_facts(line_no: usize, line: &str) -> Result<FactsDevice, CaseError> {
    let f = fields(line);
    if !matches!(f.len(), 3 | 6 | 8) {
        return Err(perr(
            line_no,
            "facts row needs: kind from to [pinj qinj1 qinj2 [gll bll]]",
        ));
    }
    let kind = DeviceKind::parse(f[0])
        .ok_or_else(|| perr(line_no, format!("unknown device kind {:?}", f[0])))?;
    let mut dev = FactsDevice::new(
        kind,
        int(line_no, "from bus", f[1])?,
        int(line_no, "to bus", f[2])?,
    );
    if f.len() >= 6 {
        dev.limits.p_inj = Bounds::symmetric(num(line_no, "pinj_max", f[3])?);
        dev.limits.q_inj1 = Bounds::symmetric(num(line_no, "qinj1_max", f[4])?);
        dev.limits.q_inj2 = Bounds::symmetric(num(line_no, "qinj2_max", f[5])?);
    }
    if f.len() == 8 {
        dev.series_admittance_override = Some(Complex64::new(
            num(line_no, "gll", f[6])?,
            num(line_no, "bll", f[7])?,
        ));
    }
    Ok(dev)
}

/// Case-file numeric formatting: up to six fractional digits, trailing
/// zeros trimmed.
fn case_num(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Emit a case document that parses back to the same structures.
pub fn emit_case(network: &Network, study: Option<&StudySpec>) -> String {
    let mut out = String::new();
    out.push_str("[system]\n");
    let slack = network.slack_bus().map(|b| b.id).unwrap_or(0);
    let _ = writeln!(out, "base_mva={} slack={}", case_num(network.base_mva), slack);

    out.push_str("\n[bus]\n");
    for b in &network.buses {
        match b.v_setpoint {
            Some(vs) => {
                let _ = writeln!(
                    out,
                    "{} {} {} {} {}",
                    b.id,
                    b.kind,
                    case_num(b.v_min),
                    case_num(b.v_max),
                    case_num(vs)
                );
            }
            None => {
                let _ = writeln!(out, "{} {} {} {}", b.id, b.kind, case_num(b.v_min), case_num(b.v_max));
            }
        }
    }

    out.push_str("\n[branch]\n");
    for br in &network.branches {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            br.from_bus,
            br.to_bus,
            case_num(br.resistance),
            case_num(br.reactance),
            case_num(br.charging),
            case_num(br.rating * network.base_mva)
        );
    }

    out.push_str("\n[generator]\n");
    for g in &network.generators {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            g.bus,
            case_num(g.p_min),
            case_num(g.p_max),
            case_num(g.q_min),
            case_num(g.q_max),
            case_num(g.p_setpoint)
        );
    }

    out.push_str("\n[load]\n");
    for l in &network.loads {
        let _ = writeln!(out, "{} {} {}", l.bus, case_num(l.p_req), case_num(l.q_req));
    }

    if !network.facts_devices.is_empty() {
        out.push_str("\n[facts]\n");
        for d in &network.facts_devices {
            let mut row = format!(
                "{} {} {} {} {} {}",
                d.kind,
                d.i_bus,
                d.j_bus,
                case_num(d.limits.p_inj.max),
                case_num(d.limits.q_inj1.max),
                case_num(d.limits.q_inj2.max)
            );
            if let Some(ys) = d.series_admittance_override {
                let _ = write!(row, " {} {}", case_num(ys.re), case_num(ys.im));
            }
            out.push_str(&row);
            out.push('\n');
        }
    }

    if let Some(spec) = study {
        out.push_str("\n[study]\n");
        let _ = writeln!(out, "name={}", spec.name);
        let _ = writeln!(
            out,
            "mode={}",
            match spec.mode {
                StudyMode::PowerFlow => "pf",
                StudyMode::Curtailment => "opf",
            }
        );
        out.push_str(&emit_settings(&spec.defaults, ""));
        for s in &spec.scenarios {
            let body = emit_settings(&s.settings, " ");
            let body = body.replace('\n', " ");
            let _ = writeln!(out, "scenario.{}={}", s.name, body.trim());
        }
    }
    out
}

fn emit_settings(s: &crate::study::ScenarioSettings, joiner: &str) -> String {
    let mut parts: Vec<String> = Vec::new();
    if let Some((a, b)) = s.outage {
        parts.push(format!("outage={a}-{b}"));
    }
    if let Some(d) = s.lcrit_default {
        parts.push(format!("lcrit.default={}", case_num(d)));
    }
    for (&bus, &v) in &s.lcrit {
        parts.push(format!("lcrit.{bus}={}", case_num(v)));
    }
    for (&bus, &(p, q)) in &s.load_overrides {
        let sign = if q < 0.0 { "-" } else { "+" };
        parts.push(format!("load.{bus}={}{}j{}", case_num(p), sign, case_num(q.abs())));
    }
    for d in &s.devices {
        match d.rating {
            Some(r) => parts.push(format!("device={}:{}-{}:{}", d.kind, d.i_bus, d.j_bus, case_num(r))),
            None => parts.push(format!("device={}:{}-{}", d.kind, d.i_bus, d.j_bus)),
        }
    }
    if joiner.is_empty() {
        let mut out = String::new();
        for p in parts {
            out.push_str(&p);
            out.push('\n');
        }
        out
    } else {
        parts.join(joiner)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    PerUnit,
    Mw,
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub format: Format,
    pub units: Units,
    pub base_mva: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { format: Format::Table, units: Units::PerUnit, base_mva: 100.0 }
    }
}

impl ReportOptions {
    fn sep(&self) -> &'static str {
        match self.format {
            Format::Table => ", ",
            Format::Csv => ",",
        }
    }

    fn power(&self, x: f64) -> f64 {
        match self.units {
            Units::PerUnit => x,
            Units::Mw => x * self.base_mva,
        }
    }
}

pub enum Report<'a> {
    PowerFlow(&'a PowerFlowSolution),
    Stability(&'a StabilityReport),
    Curtailment(&'a CurtailmentResult),
    Sweep(&'a SweepResult),
}

fn cell(x: f64) -> String {
    format!("{x:.4}")
}

/// Render a result as a fixed four-decimal table or CSV.
pub fn emit_report(report: Report<'_>, opts: &ReportOptions) -> String {
    match report {
        Report::Stability(r) => emit_stability(r, opts),
        Report::PowerFlow(r) => emit_power_flow(r, opts),
        Report::Curtailment(r) => emit_curtailment(r, opts),
        Report::Sweep(r) => emit_sweep(r, opts),
    }
}

fn emit_stability(r: &StabilityReport, opts: &ReportOptions) -> String {
    let sep = opts.sep();
    let mut out = String::new();
    let _ = writeln!(out, "bus{sep}l_index{sep}vm{sep}va_deg");
    for (k, &bus) in r.load_bus_ids.iter().enumerate() {
        let _ = writeln!(
            out,
            "{bus}{sep}{}{sep}{}{sep}{}",
            cell(r.l[k]),
            cell(r.vm[k]),
            cell(r.va[k].to_degrees())
        );
    }
    out
}

fn emit_power_flow(r: &PowerFlowSolution, opts: &ReportOptions) -> String {
    let sep = opts.sep();
    let mut out = String::new();
    let _ = writeln!(out, "bus{sep}vm{sep}va_deg");
    for (k, &bus) in r.bus_ids.iter().enumerate() {
        let _ = writeln!(out, "{bus}{sep}{}{sep}{}", cell(r.vm[k]), cell(r.va[k].to_degrees()));
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "branch{sep}p_from{sep}q_from{sep}s_from{sep}p_to{sep}q_to{sep}s_to"
    );
    for f in &r.flows {
        let _ = writeln!(
            out,
            "{}-{}{sep}{}{sep}{}{sep}{}{sep}{}{sep}{}{sep}{}",
            f.from_bus,
            f.to_bus,
            cell(opts.power(f.p_from)),
            cell(opts.power(f.q_from)),
            cell(opts.power(f.s_from)),
            cell(opts.power(f.p_to)),
            cell(opts.power(f.q_to)),
            cell(opts.power(f.s_to))
        );
    }
    out
}

fn emit_curtailment(r: &CurtailmentResult, opts: &ReportOptions) -> String {
    let sep = opts.sep();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "bus{sep}p_required{sep}q_required{sep}p_supplied{sep}q_supplied{sep}curtailment"
    );
    for l in &r.loads {
        let _ = writeln!(
            out,
            "{}{sep}{}{sep}{}{sep}{}{sep}{}{sep}{}",
            l.bus,
            cell(opts.power(l.p_required)),
            cell(opts.power(l.q_required)),
            cell(opts.power(l.p_supplied)),
            cell(opts.power(l.q_supplied)),
            cell(opts.power(l.curtailment_p()))
        );
    }
    let _ = writeln!(
        out,
        "total{sep}{sep}{sep}{sep}{sep}{}",
        cell(opts.power(r.objective))
    );
    out
}

fn sanitize(msg: &str) -> String {
    msg.replace([',', '\n'], ";")
}

fn emit_sweep(r: &SweepResult, opts: &ReportOptions) -> String {
    let sep = opts.sep();
    let mut out = String::new();
    match r.mode {
        StudyMode::PowerFlow => {
            let _ = writeln!(out, "scenario{sep}status{sep}bus{sep}l_index{sep}vm{sep}va_deg");
            for c in &r.cells {
                match &c.outcome {
                    CellOutcome::Snapshot { stability, .. } => {
                        for (k, &bus) in stability.load_bus_ids.iter().enumerate() {
                            let _ = writeln!(
                                out,
                                "{}{sep}ok{sep}{bus}{sep}{}{sep}{}{sep}{}",
                                c.scenario,
                                cell(stability.l[k]),
                                cell(stability.vm[k]),
                                cell(stability.va[k].to_degrees())
                            );
                        }
                    }
                    CellOutcome::Failed(msg) => {
                        let _ = writeln!(
                            out,
                            "{}{sep}failed: {}{sep}{sep}{sep}{sep}",
                            c.scenario,
                            sanitize(msg)
                        );
                    }
                    CellOutcome::Curtailment { .. } => {}
                }
            }
        }
        StudyMode::Curtailment => {
            // column set: loads seen across cells, then stability buses
            let mut load_buses: Vec<usize> = Vec::new();
            let mut l_buses: Vec<usize> = Vec::new();
            for c in &r.cells {
                if let CellOutcome::Curtailment { result, stability } = &c.outcome {
                    for l in &result.loads {
                        if !load_buses.contains(&l.bus) {
                            load_buses.push(l.bus);
                        }
                    }
                    for &b in &stability.load_bus_ids {
                        if !l_buses.contains(&b) {
                            l_buses.push(b);
                        }
                    }
                }
            }
            load_buses.sort_unstable();
            l_buses.sort_unstable();
            let mut header = format!("scenario{sep}status{sep}total_curtailment");
            for b in &load_buses {
                let _ = write!(header, "{sep}curt_{b}");
            }
            for b in &l_buses {
                let _ = write!(header, "{sep}vm_{b}{sep}l_{b}");
            }
            let _ = writeln!(out, "{header}");
            for c in &r.cells {
                match &c.outcome {
                    CellOutcome::Curtailment { result, stability } => {
                        let mut row = format!(
                            "{}{sep}ok{sep}{}",
                            c.scenario,
                            cell(opts.power(result.objective))
                        );
                        for &b in &load_buses {
                            let _ = write!(row, "{sep}{}", cell(opts.power(result.curtailment_at(b))));
                        }
                        for &b in &l_buses {
                            let vm = stability
                                .load_bus_ids
                                .iter()
                                .position(|&x| x == b)
                                .map(|i| (stability.vm[i], stability.l[i]));
                            match vm {
                                Some((v, l)) => {
                                    let _ = write!(row, "{sep}{}{sep}{}", cell(v), cell(l));
                                }
                                None => {
                                    let _ = write!(row, "{sep}{sep}");
                                }
                            }
                        }
                        let _ = writeln!(out, "{row}");
                    }
                    CellOutcome::Failed(msg) => {
                        let mut row = format!("{}{sep}failed: {}{sep}", c.scenario, sanitize(msg));
                        for _ in &load_buses {
                            let _ = write!(row, "{sep}");
                        }
                        for _ in &l_buses {
                            let _ = write!(row, "{sep}{sep}");
                        }
                        let _ = writeln!(out, "{row}");
                    }
                    CellOutcome::Snapshot { .. } => {}
                }
            }
            if let Some(grid) = r.placement_grid() {
                out.push('\n');
                let mut header = String::from("placement");
                for k in &grid.kinds {
                    let _ = write!(header, "{sep}{k}");
                }
                let _ = writeln!(out, "{header}");
                for (row_idx, placement) in grid.placements.iter().enumerate() {
                    let mut row = placement.clone();
                    for col in 0..grid.kinds.len() {
                        match grid.curtailments[row_idx][col] {
                            Some(v) => {
                                let _ = write!(row, "{sep}{}", cell(opts.power(v)));
                            }
                            None => {
                                let _ = write!(row, "{sep}");
                            }
                        }
                    }
                    let _ = writeln!(out, "{row}");
                }
            }
        }
    }
    out
}
