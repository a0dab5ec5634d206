//! Kessel-Glavitsch L voltage-stability index per load bus.
//!
//! With the admittance matrix partitioned into load (PQ) and generator
//! (PV + slack) blocks, the participation matrix is
//! `F = -inv(Y_LL) * Y_LG` and the index at load bus j is
//! `L_j = |1 - (sum_i F_ji * V_i) / V_j|` over generator buses i. At no
//! load `V_L = F * V_G` exactly, so every `L_j` is zero; values near one
//! flag steady-state voltage collapse.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::admittance::PartitionedY;
use crate::powerflow::PowerFlowSolution;

#[derive(Debug, Clone)]
pub struct StabilityReport {
    /// PQ buses in the partition order.
    pub load_bus_ids: Vec<usize>,
    pub gen_bus_ids: Vec<usize>,
    /// Index value per load bus.
    pub l: Vec<f64>,
    /// Voltage magnitude per load bus, from the solution.
    pub vm: Vec<f64>,
    /// Voltage angle per load bus, radians.
    pub va: Vec<f64>,
    /// Participation matrix `-inv(Y_LL) * Y_LG`.
    pub f_matrix: DMatrix<Complex64>,
}

impl StabilityReport {
    pub fn l_at(&self, bus_id: usize) -> Option<f64> {
        self.load_bus_ids
            .iter()
            .position(|&b| b == bus_id)
            .map(|i| self.l[i])
    }

    pub fn max_l(&self) -> f64 {
        self.l.iter().fold(0.0f64, |m, &v| m.max(v))
    }
}

/// Per-bus critical thresholds with a default for unlisted buses.
#[derive(Debug, Clone)]
pub struct LcritMap {
    pub default: f64,
    pub per_bus: BTreeMap<usize, f64>,
}

impl Default for LcritMap {
    fn default() -> Self {
        LcritMap { default: 1.0, per_bus: BTreeMap::new() }
    }
}

impl LcritMap {
    pub fn uniform(value: f64) -> LcritMap {
        LcritMap { default: value, per_bus: BTreeMap::new() }
    }

    pub fn threshold(&self, bus_id: usize) -> f64 {
        self.per_bus.get(&bus_id).copied().unwrap_or(self.default)
    }

    pub fn set(&mut self, bus_id: usize, value: f64) {
        self.per_bus.insert(bus_id, value);
    }

    /// Parse `5=0.1,7=0.3,default=0.5` style specs.
    pub fn parse(spec: &str) -> Result<LcritMap, String> {
        let mut map = LcritMap::default();
        for tok in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (key, val) = tok
                .split_once('=')
                .ok_or_else(|| format!("bad lcrit entry {tok:?}: expected BUS=VALUE"))?;
            let value: f64 = val
                .trim()
                .parse()
                .map_err(|_| format!("bad lcrit value {val:?}"))?;
            if !(value > 0.0) {
                return Err(format!("lcrit must be positive, got {value}"));
            }
            let key = key.trim();
            if key == "default" {
                map.default = value;
            } else {
                let bus: usize = key
                    .parse()
                    .map_err(|_| format!("bad lcrit bus {key:?}"))?;
                map.set(bus, value);
            }
        }
        Ok(map)
    }
}

#[derive(Debug, Clone)]
pub struct MarginViolation {
    pub bus: usize,
    pub l: f64,
    pub l_crit: f64,
    /// Amount by which the index exceeds its threshold.
    pub excess: f64,
}

#[derive(Debug, Error)]
pub enum LIndexError {
    #[error("Y_LL block is singular; cannot form the participation matrix")]
    SingularYll,
    #[error("solution does not cover bus {0}")]
    MissingBus(usize),
}

/// Participation matrix from the partition alone; it depends only on the
/// in-service topology and admittances, never on dispatch.
pub fn participation_matrix(party: &PartitionedY) -> Result<DMatrix<Complex64>, LIndexError> {
    let lu = party.y_ll.clone().lu();
    let solved = lu.solve(&party.y_lg).ok_or(LIndexError::SingularYll)?;
    Ok(-solved)
}

/// Evaluate the index at every load bus of the partition using the solved
/// voltage phasors.
pub fn compute_l_index(
    party: &PartitionedY,
    solution: &PowerFlowSolution,
) -> Result<StabilityReport, LIndexError> {
    let f = participation_matrix(party)?;
    let phasor = |bus: usize| -> Result<Complex64, LIndexError> {
        let i = solution.bus_index(bus).ok_or(LIndexError::MissingBus(bus))?;
        Ok(Complex64::from_polar(solution.vm[i], solution.va[i]))
    };
    let v_gen: Vec<Complex64> = party
        .gen_bus_ids
        .iter()
        .map(|&b| phasor(b))
        .collect::<Result<_, _>>()?;
    let mut l = Vec::with_capacity(party.load_bus_ids.len());
    let mut vm = Vec::with_capacity(party.load_bus_ids.len());
    let mut va = Vec::with_capacity(party.load_bus_ids.len());
    for (r, &bus) in party.load_bus_ids.iter().enumerate() {
        let vj = phasor(bus)?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (c, vg) in v_gen.iter().enumerate() {
            acc += f[(r, c)] * vg;
        }
        l.push((Complex64::new(1.0, 0.0) - acc / vj).norm());
        vm.push(vj.norm());
        va.push(vj.arg());
    }
    Ok(StabilityReport {
        load_bus_ids: party.load_bus_ids.clone(),
        gen_bus_ids: party.gen_bus_ids.clone(),
        l,
        vm,
        va,
        f_matrix: f,
    })
}

/// Buses whose index exceeds the applicable threshold.
pub fn check_margin(report: &StabilityReport, lcrit: &LcritMap) -> Vec<MarginViolation> {
    report
        .load_bus_ids
        .iter()
        .zip(&report.l)
        .filter_map(|(&bus, &l)| {
            let l_crit = lcrit.threshold(bus);
            (l > l_crit).then(|| MarginViolation { bus, l, l_crit, excess: l - l_crit })
        })
        .collect()
}
