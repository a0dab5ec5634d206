//! Immutable network data model: buses, branches, generators, loads and
//! the validation rules every other module relies on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::facts::FactsDevice;

/// Role of a bus in the plain power flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

impl fmt::Display for BusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BusKind::Slack => write!(f, "slack"),
            BusKind::Pv => write!(f, "pv"),
            BusKind::Pq => write!(f, "pq"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Lower voltage magnitude bound, per-unit.
    pub v_min: f64,
    /// Upper voltage magnitude bound, per-unit.
    pub v_max: f64,
    /// Scheduled voltage magnitude for PV and slack buses.
    pub v_setpoint: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    /// Series resistance, per-unit.
    pub resistance: f64,
    /// Series reactance, per-unit. Must be nonzero.
    pub reactance: f64,
    /// Total line-charging susceptance, per-unit.
    pub charging: f64,
    /// Apparent-power rating, per-unit on the system base.
    pub rating: f64,
    pub in_service: bool,
}

impl Branch {
    /// Series admittance `1/(r + jx)`.
    pub fn series_admittance(&self) -> num_complex::Complex64 {
        num_complex::Complex64::new(1.0, 0.0)
            / num_complex::Complex64::new(self.resistance, self.reactance)
    }

    /// True if the branch connects buses `a` and `b` in either orientation.
    pub fn joins(&self, a: usize, b: usize) -> bool {
        (self.from_bus == a && self.to_bus == b) || (self.from_bus == b && self.to_bus == a)
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Dispatch used by the plain power flow; the OPF treats P as a variable.
    pub p_setpoint: f64,
}

#[derive(Debug, Clone)]
pub struct Load {
    pub bus: usize,
    /// Real demand, per-unit.
    pub p_req: f64,
    /// Reactive demand, per-unit.
    pub q_req: f64,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
    pub facts_devices: Vec<FactsDevice>,
    pub base_mva: f64,
}

/// Outcome of [`validate`]; an empty report means the network is usable.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            write!(f, "ok")
        } else {
            for v in &self.violations {
                writeln!(f, "{v}")?;
            }
            Ok(())
        }
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("unknown branch {from}-{to}")]
    UnknownBranch { from: usize, to: usize },
    #[error("branch {from}-{to} is already out of service")]
    BranchOutOfService { from: usize, to: usize },
    #[error("islanding: bus {bus} disconnected")]
    Islanding { bus: usize },
    #[error("unknown bus {0}")]
    UnknownBus(usize),
    #[error("invalid branch spec {0:?}: expected FROM-TO")]
    BadBranchSpec(String),
}

impl Network {
    /// Bus ids in ascending order; this is the matrix ordering used by
    /// every solver in the crate.
    pub fn bus_order(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.buses.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Map bus id -> matrix index under [`bus_order`](Self::bus_order).
    pub fn bus_index_map(&self) -> BTreeMap<usize, usize> {
        self.bus_order()
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect()
    }

    pub fn bus(&self, id: usize) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn slack_bus(&self) -> Option<&Bus> {
        self.buses.iter().find(|b| b.kind == BusKind::Slack)
    }

    /// Index into `branches` of the branch joining `a` and `b`, either
    /// orientation.
    pub fn find_branch(&self, a: usize, b: usize) -> Option<usize> {
        self.branches.iter().position(|br| br.joins(a, b))
    }

    pub fn in_service_branches(&self) -> impl Iterator<Item = &Branch> {
        self.branches.iter().filter(|b| b.in_service)
    }

    /// Buses on the generator side of the L-index partition: PV and slack.
    pub fn generator_bus_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .buses
            .iter()
            .filter(|b| b.kind != BusKind::Pq)
            .map(|b| b.id)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// All non-generator buses, ascending.
    pub fn load_bus_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Pq)
            .map(|b| b.id)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Copy of the network with the branch joining `from`-`to` flagged out
    /// of service. Fails if the branch is unknown, already out, or if the
    /// outage disconnects the grid.
    pub fn apply_outage(&self, from: usize, to: usize) -> Result<Network, NetworkError> {
        let idx = self
            .find_branch(from, to)
            .ok_or(NetworkError::UnknownBranch { from, to })?;
        if !self.branches[idx].in_service {
            return Err(NetworkError::BranchOutOfService { from, to });
        }
        let mut out = self.clone();
        out.branches[idx].in_service = false;
        if let Some(bus) = out.first_disconnected_bus() {
            return Err(NetworkError::Islanding { bus });
        }
        Ok(out)
    }

    /// Lowest bus id of the smallest island when the grid is split over
    /// in-service branches, or `None` when connected.
    fn first_disconnected_bus(&self) -> Option<usize> {
        let ids = self.bus_order();
        let mut unvisited: BTreeSet<usize> = ids.iter().copied().collect();
        let mut components: Vec<Vec<usize>> = Vec::new();
        while let Some(&start) = unvisited.iter().next() {
            let mut comp = Vec::new();
            let mut stack = vec![start];
            while let Some(id) = stack.pop() {
                if !unvisited.remove(&id) {
                    continue;
                }
                comp.push(id);
                for br in self.in_service_branches() {
                    if br.from_bus == id {
                        stack.push(br.to_bus);
                    } else if br.to_bus == id {
                        stack.push(br.from_bus);
                    }
                }
            }
            comp.sort_unstable();
            components.push(comp);
        }
        if components.len() <= 1 {
            return None;
        }
        // the stranded island is the smaller one; ties go to the island
        // without the slack bus
        let slack = self.slack_bus().map(|b| b.id);
        components.sort_by_key(|c| {
            (
                c.len(),
                std::cmp::Reverse(slack.map_or(0, |s| usize::from(!c.contains(&s)))),
            )
        });
        components.first().and_then(|c| c.first().copied())
    }
}

/// Parse a `FROM-TO` branch spec such as `4-9`.
pub fn parse_branch_pair(spec: &str) -> Result<(usize, usize), NetworkError> {
    let mut it = spec.splitn(2, '-');
    let a = it
        .next()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .ok_or_else(|| NetworkError::BadBranchSpec(spec.to_string()))?;
    let b = it
        .next()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .ok_or_else(|| NetworkError::BadBranchSpec(spec.to_string()))?;
    Ok((a, b))
}

/// Check every structural invariant of the model. Violations are returned,
/// not raised, so callers can print them all at once.
pub fn validate(network: &Network) -> ValidationReport {
    let mut v = Vec::new();

    let mut ids = BTreeSet::new();
    for bus in &network.buses {
        if bus.id == 0 {
            v.push(format!("bus id must be a positive integer, got {}", bus.id));
        }
        if !ids.insert(bus.id) {
            v.push(format!("duplicate bus id {}", bus.id));
        }
        if !(bus.v_min > 0.0 && bus.v_min <= bus.v_max) {
            v.push(format!(
                "bus {}: voltage bounds must satisfy 0 < vmin <= vmax, got [{}, {}]",
                bus.id, bus.v_min, bus.v_max
            ));
        }
        if bus.kind != BusKind::Pq && bus.v_setpoint.is_none() {
            v.push(format!("bus {}: {} bus requires a voltage setpoint", bus.id, bus.kind));
        }
        if let Some(vs) = bus.v_setpoint {
            if vs <= 0.0 {
                v.push(format!("bus {}: voltage setpoint must be positive", bus.id));
            }
        }
    }

    let slack_count = network
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Slack)
        .count();
    if slack_count == 0 {
        v.push("no slack bus declared".to_string());
    } else if slack_count > 1 {
        v.push("multiple slack buses".to_string());
    }

    for (k, br) in network.branches.iter().enumerate() {
        let tag = format!("branch {}-{}", br.from_bus, br.to_bus);
        if br.reactance == 0.0 {
            v.push(format!("{tag}: x must be nonzero"));
        }
        if br.resistance < 0.0 {
            v.push(format!("{tag}: r must be nonnegative"));
        }
        if br.charging < 0.0 {
            v.push(format!("{tag}: charging b must be nonnegative"));
        }
        if br.rating <= 0.0 {
            v.push(format!("{tag}: rating must be positive"));
        }
        if br.from_bus == br.to_bus {
            v.push(format!("{tag}: endpoints must differ"));
        }
        for end in [br.from_bus, br.to_bus] {
            if !ids.contains(&end) {
                v.push(format!("{tag}: references unknown bus {end}"));
            }
        }
        if network.branches[..k].iter().any(|o| o.joins(br.from_bus, br.to_bus)) {
            v.push(format!("{tag}: parallel branch between the same buses"));
        }
    }

    for g in &network.generators {
        if !ids.contains(&g.bus) {
            v.push(format!("generator at unknown bus {}", g.bus));
        } else if let Some(bus) = network.bus(g.bus) {
            if bus.kind == BusKind::Pq {
                v.push(format!("generator at bus {}: bus must be pv or slack", g.bus));
            }
        }
        if g.p_min > g.p_max {
            v.push(format!("generator at bus {}: pmin > pmax", g.bus));
        }
        if g.q_min > g.q_max {
            v.push(format!("generator at bus {}: qmin > qmax", g.bus));
        }
    }

    for l in &network.loads {
        if !ids.contains(&l.bus) {
            v.push(format!("load at unknown bus {}", l.bus));
        }
        if l.p_req < 0.0 {
            v.push(format!("load at bus {}: p must be nonnegative", l.bus));
        }
        if l.p_req == 0.0 && l.q_req == 0.0 {
            v.push(format!("load at bus {}: p and q both zero", l.bus));
        }
        if l.q_req > 0.0 && l.p_req <= 0.0 {
            v.push(format!(
                "load at bus {}: reactive demand without real demand leaves the power factor undefined",
                l.bus
            ));
        }
    }

    for (k, d) in network.facts_devices.iter().enumerate() {
        let tag = format!("facts device {} ({} {}-{})", k + 1, d.kind, d.i_bus, d.j_bus);
        if network.find_branch(d.i_bus, d.j_bus).is_none() {
            v.push(format!("{tag}: no branch joins its terminals"));
        }
        for msg in d.check_invariants() {
            v.push(format!("{tag}: {msg}"));
        }
    }

    if network.base_mva <= 0.0 {
        v.push(format!("base mva must be positive, got {}", network.base_mva));
    }

    if let Some(bus) = network.first_disconnected_bus() {
        v.push(format!("islanding: bus {bus} disconnected"));
    }

    ValidationReport { violations: v }
}
