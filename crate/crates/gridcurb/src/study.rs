//! Batch experiment runner: named scenarios over a shared base network,
//! each an outage/device/threshold/load variation, solved concurrently
//! with per-cell failure capture.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::admittance::{build_ybus, partition};
use crate::curtailopf::{solve_curtailment, CurtailmentResult, OpfOptions};
use crate::facts::{Bounds, DeviceKind, FactsDevice};
use crate::lindex::{compute_l_index, LcritMap, StabilityReport};
use crate::netmodel::{parse_branch_pair, Load, Network};
use crate::powerflow::{solve_power_flow, PowerFlowOptions, PowerFlowSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyMode {
    PowerFlow,
    Curtailment,
}

/// Device request inside a scenario: kind, terminals as written (the
/// first bus is the shunt attachment and series insertion point), and a
/// symmetric injection rating applied to the applicable limits.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    pub kind: DeviceKind,
    pub i_bus: usize,
    pub j_bus: usize,
    pub rating: Option<f64>,
}

impl DeviceSpec {
    /// Parse `kind:I-J` or `kind:I-J:rating`.
    pub fn parse(token: &str) -> Result<DeviceSpec, String> {
        let mut parts = token.split(':');
        let kind = parts
            .next()
            .and_then(DeviceKind::parse)
            .ok_or_else(|| format!("unknown device kind in {token:?}"))?;
        let pair = parts
            .next()
            .ok_or_else(|| format!("missing terminals in {token:?}"))?;
        let (i, j) = parse_branch_pair(pair).map_err(|e| e.to_string())?;
        let rating = match parts.next() {
            Some(r) => Some(
                r.parse::<f64>()
                    .map_err(|_| format!("bad device rating in {token:?}"))?,
            ),
            None => None,
        };
        if parts.next().is_some() {
            return Err(format!("trailing fields in device spec {token:?}"));
        }
        Ok(DeviceSpec { kind, i_bus: i, j_bus: j, rating })
    }

    pub fn build(&self) -> FactsDevice {
        let mut d = FactsDevice::new(self.kind, self.i_bus, self.j_bus);
        if let Some(r) = self.rating {
            d.limits.p_inj = Bounds::symmetric(r);
            d.limits.q_inj1 = Bounds::symmetric(r);
            d.limits.q_inj2 = Bounds::symmetric(r);
        }
        d
    }
}

/// Settings layered from study defaults plus one scenario's directives.
#[derive(Debug, Clone, Default)]
pub struct ScenarioSettings {
    pub outage: Option<(usize, usize)>,
    pub lcrit: BTreeMap<usize, f64>,
    pub lcrit_default: Option<f64>,
    pub load_overrides: BTreeMap<usize, (f64, f64)>,
    pub devices: Vec<DeviceSpec>,
}

impl ScenarioSettings {
    fn merged_with(&self, over: &ScenarioSettings) -> ScenarioSettings {
        let mut out = self.clone();
        if over.outage.is_some() {
            out.outage = over.outage;
        }
        if over.lcrit_default.is_some() {
            out.lcrit_default = over.lcrit_default;
        }
        for (&b, &v) in &over.lcrit {
            out.lcrit.insert(b, v);
        }
        for (&b, &pq) in &over.load_overrides {
            out.load_overrides.insert(b, pq);
        }
        if !over.devices.is_empty() {
            out.devices = over.devices.clone();
        }
        out
    }

    pub fn lcrit_map(&self) -> LcritMap {
        let mut map = LcritMap::default();
        if let Some(d) = self.lcrit_default {
            map.default = d;
        }
        for (&b, &v) in &self.lcrit {
            map.set(b, v);
        }
        map
    }

    /// Apply `key=value` directive tokens.
    fn apply_directive(&mut self, key: &str, value: &str) -> Result<(), String> {
        if key == "outage" {
            self.outage = Some(parse_branch_pair(value).map_err(|e| e.to_string())?);
        } else if key == "device" {
            self.devices.push(DeviceSpec::parse(value)?);
        } else if let Some(rest) = key.strip_prefix("lcrit.") {
            let v: f64 = value
                .parse()
                .map_err(|_| format!("bad lcrit value {value:?}"))?;
            if rest == "default" {
                self.lcrit_default = Some(v);
            } else {
                let bus: usize = rest.parse().map_err(|_| format!("bad lcrit bus {rest:?}"))?;
                self.lcrit.insert(bus, v);
            }
        } else if let Some(rest) = key.strip_prefix("load.") {
            let bus: usize = rest.parse().map_err(|_| format!("bad load bus {rest:?}"))?;
            self.load_overrides.insert(bus, parse_complex_pq(value)?);
        } else {
            return Err(format!("unknown study key {key:?}"));
        }
        Ok(())
    }
}

/// Parse `P+jQ` (or `P-jQ`) into a (p, q) pair.
pub fn parse_complex_pq(s: &str) -> Result<(f64, f64), String> {
    let t = s.trim();
    let ix = t[1..]
        .find(['+', '-'])
        .map(|i| i + 1)
        .ok_or_else(|| format!("bad complex value {s:?}: expected P+jQ"))?;
    let (p_str, rest) = t.split_at(ix);
    let sign = if rest.starts_with('-') { -1.0 } else { 1.0 };
    let q_str = rest[1..]
        .strip_prefix(['j', 'J'])
        .ok_or_else(|| format!("bad complex value {s:?}: expected P+jQ"))?;
    let p: f64 = p_str.trim().parse().map_err(|_| format!("bad real part in {s:?}"))?;
    let q: f64 = q_str.trim().parse().map_err(|_| format!("bad imag part in {s:?}"))?;
    Ok((p, sign * q))
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub settings: ScenarioSettings,
}

#[derive(Debug, Clone)]
pub struct StudySpec {
    pub name: String,
    pub mode: StudyMode,
    pub defaults: ScenarioSettings,
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, Error)]
pub enum StudyParseError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("study is missing mode=pf|opf")]
    MissingMode,
}

impl StudySpec {
    /// Interpret the `[study]` section's `key=value` lines.
    pub fn from_lines(lines: &[(usize, String, String)]) -> Result<StudySpec, StudyParseError> {
        let mut name = String::from("study");
        let mut mode = None;
        let mut defaults = ScenarioSettings::default();
        let mut scenarios = Vec::new();
        for (line_no, key, value) in lines {
            let err = |message: String| StudyParseError::Line { line: *line_no, message };
            if key == "name" {
                name = value.clone();
            } else if key == "mode" {
                mode = Some(match value.as_str() {
                    "pf" => StudyMode::PowerFlow,
                    "opf" => StudyMode::Curtailment,
                    other => return Err(err(format!("unknown mode {other:?}"))),
                });
            } else if let Some(scen_name) = key.strip_prefix("scenario.") {
                if scen_name.is_empty() {
                    return Err(err("scenario needs a name".to_string()));
                }
                if scenarios.iter().any(|s: &Scenario| s.name == scen_name) {
                    return Err(err(format!("duplicate scenario {scen_name:?}")));
                }
                let mut settings = ScenarioSettings::default();
                for token in value.split_whitespace() {
                    let (k, v) = token
                        .split_once('=')
                        .ok_or_else(|| err(format!("bad directive {token:?}")))?;
                    settings.apply_directive(k, v).map_err(err)?;
                }
                scenarios.push(Scenario { name: scen_name.to_string(), settings });
            } else {
                defaults.apply_directive(key, value).map_err(err)?;
            }
        }
        Ok(StudySpec {
            name,
            mode: mode.ok_or(StudyParseError::MissingMode)?,
            defaults,
            scenarios,
        })
    }

    /// Fully merged settings per scenario, in declaration order.
    pub fn resolved_scenarios(&self) -> Vec<Scenario> {
        self.scenarios
            .iter()
            .map(|s| Scenario {
                name: s.name.clone(),
                settings: self.defaults.merged_with(&s.settings),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum CellOutcome {
    Snapshot {
        solution: PowerFlowSolution,
        stability: StabilityReport,
    },
    Curtailment {
        result: CurtailmentResult,
        /// Index recomputed from the returned phasors.
        stability: StabilityReport,
    },
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub scenario: String,
    /// Branch label(s) of the scenario's devices, for grid pivots.
    pub placement: String,
    pub kind: Option<DeviceKind>,
    pub outcome: CellOutcome,
    pub wall_time: Duration,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub study_name: String,
    pub mode: StudyMode,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, scenario: &str) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.scenario == scenario)
    }

    /// Placement-by-kind pivot of total curtailment; rows appear in first
    /// encounter order, one column per device kind seen.
    pub fn placement_grid(&self) -> Option<PlacementGrid> {
        if self.mode != StudyMode::Curtailment {
            return None;
        }
        let mut rows: Vec<String> = Vec::new();
        let mut kinds: Vec<DeviceKind> = Vec::new();
        for c in &self.cells {
            if !rows.contains(&c.placement) {
                rows.push(c.placement.clone());
            }
            if let Some(k) = c.kind {
                if !kinds.contains(&k) {
                    kinds.push(k);
                }
            }
        }
        if kinds.is_empty() {
            return None;
        }
        let mut cells = vec![vec![None; kinds.len()]; rows.len()];
        for c in &self.cells {
            let r = rows.iter().position(|p| *p == c.placement).unwrap();
            let value = match &c.outcome {
                CellOutcome::Curtailment { result, .. } => Some(result.objective),
                _ => None,
            };
            match c.kind {
                Some(k) => {
                    let col = kinds.iter().position(|&x| x == k).unwrap();
                    cells[r][col] = value;
                }
                None => {
                    // a no-device row applies to every kind column
                    for col in 0..kinds.len() {
                        cells[r][col] = value;
                    }
                }
            }
        }
        Some(PlacementGrid { placements: rows, kinds, curtailments: cells })
    }
}

#[derive(Debug, Clone)]
pub struct PlacementGrid {
    pub placements: Vec<String>,
    pub kinds: Vec<DeviceKind>,
    pub curtailments: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("scenario {scenario}: {message}")]
    Scenario { scenario: String, message: String },
    #[error("study mode mismatch: expected {expected:?}")]
    ModeMismatch { expected: StudyMode },
}

/// Materialize one scenario's network.
fn scenario_network(base: &Network, s: &Scenario) -> Result<Network, String> {
    let mut net = base.clone();
    for (&bus, &(p, q)) in &s.settings.load_overrides {
        match net.loads.iter_mut().find(|l| l.bus == bus) {
            Some(l) => {
                l.p_req = p;
                l.q_req = q;
            }
            None => net.loads.push(Load { bus, p_req: p, q_req: q }),
        }
    }
    net.facts_devices = s
        .settings
        .devices
        .iter()
        .map(DeviceSpec::build)
        .collect();
    for d in &net.facts_devices {
        if net.find_branch(d.i_bus, d.j_bus).is_none() {
            return Err(format!("device {}-{} matches no branch", d.i_bus, d.j_bus));
        }
    }
    if let Some((a, b)) = s.settings.outage {
        net = net.apply_outage(a, b).map_err(|e| e.to_string())?;
    }
    Ok(net)
}

fn placement_label(base: &Network, s: &Scenario) -> String {
    if s.settings.devices.is_empty() {
        return "none".to_string();
    }
    s.settings
        .devices
        .iter()
        .map(|d| match base.find_branch(d.i_bus, d.j_bus) {
            Some(k) => {
                let br = &base.branches[k];
                format!("{}-{}", br.from_bus, br.to_bus)
            }
            None => format!("{}-{}", d.i_bus, d.j_bus),
        })
        .collect::<Vec<_>>()
        .join(" & ")
}

fn run_cell(base: &Network, scenario: &Scenario, mode: StudyMode, seed: u64) -> CellOutcome {
    let net = match scenario_network(base, scenario) {
        Ok(n) => n,
        Err(e) => return CellOutcome::Failed(e),
    };
    match mode {
        StudyMode::PowerFlow => {
            let sol = match solve_power_flow(&net, &PowerFlowOptions::default()) {
                Ok(s) => s,
                Err(e) => return CellOutcome::Failed(e.to_string()),
            };
            let party = match partition(&build_ybus(&net), &net) {
                Ok(p) => p,
                Err(e) => return CellOutcome::Failed(e.to_string()),
            };
            match compute_l_index(&party, &sol) {
                Ok(stability) => CellOutcome::Snapshot { solution: sol, stability },
                Err(e) => CellOutcome::Failed(e.to_string()),
            }
        }
        StudyMode::Curtailment => {
            let opts = OpfOptions { seed, ..OpfOptions::default() };
            let result = match solve_curtailment(&net, &scenario.settings.lcrit_map(), &opts) {
                Ok(r) => r,
                Err(e) => return CellOutcome::Failed(e.to_string()),
            };
            let party = match partition(&build_ybus(&net), &net) {
                Ok(p) => p,
                Err(e) => return CellOutcome::Failed(e.to_string()),
            };
            // recompute the index from the returned phasors; this is the
            // cross-module consistency surface used by margin checks
            let pf_like = PowerFlowSolution {
                bus_ids: result.bus_ids.clone(),
                vm: result.vm.clone(),
                va: result.va.clone(),
                flows: Vec::new(),
                slack_p: 0.0,
                slack_q: 0.0,
                iterations: result.iterations,
                final_mismatch: result.feascond,
            };
            match compute_l_index(&party, &pf_like) {
                Ok(stability) => CellOutcome::Curtailment { result, stability },
                Err(e) => CellOutcome::Failed(e.to_string()),
            }
        }
    }
}

/// Run every scenario of the spec; failures are recorded per cell. Cell
/// seeds derive from `seed` and the scenario position so results do not
/// depend on execution order.
pub fn run_study(
    base: &Network,
    spec: &StudySpec,
    seed: u64,
    threads: Option<usize>,
) -> SweepResult {
    let scenarios = spec.resolved_scenarios();
    let jobs: Vec<(usize, &Scenario)> = scenarios.iter().enumerate().collect();

    let execute = || -> Vec<SweepCell> {
        jobs.par_iter()
            .map(|&(idx, scenario)| {
                let cell_seed = seed.wrapping_add((idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let start = Instant::now();
                let outcome = run_cell(base, scenario, spec.mode, cell_seed);
                SweepCell {
                    scenario: scenario.name.clone(),
                    placement: placement_label(base, scenario),
                    kind: single_kind(&scenario.settings.devices),
                    outcome,
                    wall_time: start.elapsed(),
                }
            })
            .collect()
    };

    let cells = match threads {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(execute))
            .unwrap_or_else(|_| execute()),
        _ => execute(),
    };

    SweepResult {
        study_name: spec.name.clone(),
        mode: spec.mode,
        cells,
    }
}

fn single_kind(devices: &[DeviceSpec]) -> Option<DeviceKind> {
    let mut kinds = devices.iter().map(|d| d.kind);
    let first = kinds.next()?;
    kinds.all(|k| k == first).then_some(first)
}

/// Power-flow snapshots (base case, contingencies) per scenario.
pub fn run_snapshot_study(
    base: &Network,
    spec: &StudySpec,
    seed: u64,
    threads: Option<usize>,
) -> Result<SweepResult, StudyError> {
    if spec.mode != StudyMode::PowerFlow {
        return Err(StudyError::ModeMismatch { expected: StudyMode::PowerFlow });
    }
    Ok(run_study(base, spec, seed, threads))
}

/// Curtailment with device placements varied; see
/// [`SweepResult::placement_grid`] for the pivot.
pub fn run_placement_sweep(
    base: &Network,
    spec: &StudySpec,
    seed: u64,
    threads: Option<usize>,
) -> Result<SweepResult, StudyError> {
    if spec.mode != StudyMode::Curtailment {
        return Err(StudyError::ModeMismatch { expected: StudyMode::Curtailment });
    }
    Ok(run_study(base, spec, seed, threads))
}

/// Curtailment across stability-margin thresholds.
pub fn run_lcrit_sweep(
    base: &Network,
    spec: &StudySpec,
    seed: u64,
    threads: Option<usize>,
) -> Result<SweepResult, StudyError> {
    if spec.mode != StudyMode::Curtailment {
        return Err(StudyError::ModeMismatch { expected: StudyMode::Curtailment });
    }
    Ok(run_study(base, spec, seed, threads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caseio;

    fn wscc9() -> Network {
        caseio::parse_case(include_str!("../data/wscc9.case")).unwrap().0
    }

    fn spec_of(text: &str) -> StudySpec {
        caseio::parse_case(text).unwrap().1.unwrap()
    }

    #[test]
    fn snapshot_study_covers_base_and_outage() {
        let net = wscc9();
        let text = "[study]\nmode=pf\nname=snap\nscenario.base=\nscenario.out=outage=4-9\n";
        let spec = spec_of(&format!("{}{}", include_str!("../data/wscc9.case"), text));
        let r = run_snapshot_study(&net, &spec, 0, Some(1)).unwrap();
        assert_eq!(r.cells.len(), 2);
        for cell in &r.cells {
            match &cell.outcome {
                CellOutcome::Snapshot { stability, .. } => {
                    if cell.scenario == "base" {
                        assert!((stability.l_at(9).unwrap() - 0.198).abs() < 1e-2);
                    } else {
                        assert!(stability.l_at(9).unwrap() > 0.9);
                    }
                }
                other => panic!("unexpected outcome {other:?}"),
            }
        }
    }

    #[test]
    fn empty_scenario_list_gives_empty_result() {
        let net = wscc9();
        let spec = StudySpec {
            name: "empty".into(),
            mode: StudyMode::PowerFlow,
            defaults: ScenarioSettings::default(),
            scenarios: vec![],
        };
        let r = run_study(&net, &spec, 0, Some(1));
        assert!(r.cells.is_empty());
    }

    #[test]
    fn islanding_outage_is_recorded_not_fatal() {
        let net = wscc9();
        let text = "[study]\nmode=pf\nname=x\nscenario.ok=\nscenario.bad=outage=1-4\n";
        let spec = spec_of(&format!("{}{}", include_str!("../data/wscc9.case"), text));
        let r = run_study(&net, &spec, 0, Some(1));
        assert_eq!(r.cells.len(), 2);
        assert!(matches!(r.cell("ok").unwrap().outcome, CellOutcome::Snapshot { .. }));
        match &r.cell("bad").unwrap().outcome {
            CellOutcome::Failed(msg) => assert!(msg.contains("islanding")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn directive_parsing() {
        let mut s = ScenarioSettings::default();
        s.apply_directive("outage", "4-9").unwrap();
        s.apply_directive("lcrit.9", "0.3").unwrap();
        s.apply_directive("load.7", "1.00+j0.35").unwrap();
        s.apply_directive("device", "upfc:8-9:0.8").unwrap();
        assert_eq!(s.outage, Some((4, 9)));
        assert_eq!(s.lcrit[&9], 0.3);
        assert_eq!(s.load_overrides[&7], (1.0, 0.35));
        assert_eq!(s.devices[0].kind, DeviceKind::Upfc);
        assert_eq!(s.devices[0].rating, Some(0.8));
        assert!(s.clone().apply_directive("bogus", "1").is_err());
        assert_eq!(parse_complex_pq("1.25-j0.50").unwrap(), (1.25, -0.5));
        assert!(parse_complex_pq("1.25").is_err());
    }

    #[test]
    fn scenario_devices_replace_defaults() {
        let defaults = {
            let mut s = ScenarioSettings::default();
            s.apply_directive("device", "upfc:8-9:0.8").unwrap();
            s.apply_directive("lcrit.5", "0.3").unwrap();
            s
        };
        let over = {
            let mut s = ScenarioSettings::default();
            s.apply_directive("device", "sssc:5-6").unwrap();
            s.apply_directive("lcrit.9", "0.4").unwrap();
            s
        };
        let merged = defaults.merged_with(&over);
        assert_eq!(merged.devices.len(), 1);
        assert_eq!(merged.devices[0].kind, DeviceKind::Sssc);
        assert_eq!(merged.lcrit[&5], 0.3);
        assert_eq!(merged.lcrit[&9], 0.4);
    }

    #[test]
    fn statcom_orientation_follows_spec_order() {
        let d = DeviceSpec::parse("statcom:9-8:0.25").unwrap();
        let built = d.build();
        assert_eq!(built.i_bus, 9);
        assert_eq!(built.j_bus, 8);
        // host branch is stored 8-9 in the case; lookup is orientation-free
        let net = wscc9();
        assert!(net.find_branch(9, 8).is_some());
    }
}
