//! Voltage-stability-constrained load curtailment minimization.
//!
//! The solve minimizes total real curtailment subject to the
//! FACTS-augmented power balances, constant-power-factor shedding,
//! voltage/generation/thermal limits, the per-bus L-index ceiling and the
//! device injection limits. A primal-dual interior-point method with a
//! damped-BFGS Lagrangian Hessian does the work; a seeded multistart
//! guards against the nonconvex landscape. After the curtailment optimum
//! is found, a polish stage re-solves with the supplied loads frozen and
//! a flat-voltage-profile objective so the reported operating point is
//! reproducible rather than an arbitrary member of the optimal face.

pub mod ipm;
pub mod problem;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::facts::{DeviceControls, DeviceKind, Injections};
use crate::lindex::LcritMap;
use crate::netmodel::{Network, NetworkError};
use crate::powerflow::{solve_power_flow, PowerFlowOptions};

pub use ipm::{IpmOptions, IpmResult, NlpModel};
pub use problem::{ConstraintActivity, CurtailProblem, Objective, OperatingPoint};

#[derive(Debug, Clone)]
pub struct OpfOptions {
    pub feas_tol: f64,
    pub comp_tol: f64,
    /// Scaled stationarity tolerance. Looser than the primal tolerances:
    /// the quasi-Newton Hessian polishes dual stationarity slowly when
    /// uncurtailed loads sit at their demand bound with a vanishing
    /// multiplier.
    pub grad_tol: f64,
    pub max_iterations: usize,
    /// Number of starts; the first is power-flow based, the rest are
    /// seeded perturbations.
    pub multistart: usize,
    pub seed: u64,
    /// Load level of the fallback start when the full-load power flow
    /// diverges.
    pub fallback_load_scale: f64,
    /// Run the frozen-load voltage-profile polish stage.
    pub profile_polish: bool,
    /// Shunt-converter duty weight in the polish objective.
    pub polish_effort_weight: f64,
}

impl Default for OpfOptions {
    fn default() -> Self {
        OpfOptions {
            feas_tol: 1e-6,
            comp_tol: 1e-6,
            grad_tol: 1e-4,
            max_iterations: 400,
            multistart: 6,
            seed: 0,
            fallback_load_scale: 0.8,
            profile_polish: true,
            polish_effort_weight: 0.0,
        }
    }
}

impl OpfOptions {
    fn ipm(&self) -> IpmOptions {
        IpmOptions {
            feas_tol: self.feas_tol,
            grad_tol: self.grad_tol,
            comp_tol: self.comp_tol,
            max_iter: self.max_iterations,
            ..IpmOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NotConverged,
}

#[derive(Debug, Clone)]
pub struct LoadServed {
    pub bus: usize,
    pub p_required: f64,
    pub q_required: f64,
    pub p_supplied: f64,
    pub q_supplied: f64,
}

impl LoadServed {
    pub fn curtailment_p(&self) -> f64 {
        self.p_required - self.p_supplied
    }

    pub fn curtailment_q(&self) -> f64 {
        self.q_required - self.q_supplied
    }
}

#[derive(Debug, Clone)]
pub struct GenDispatch {
    pub bus: usize,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone)]
pub struct DeviceSetting {
    pub kind: DeviceKind,
    pub i_bus: usize,
    pub j_bus: usize,
    pub controls: DeviceControls,
    pub injections: Injections,
}

#[derive(Debug, Clone)]
pub struct CurtailmentResult {
    pub status: SolveStatus,
    /// Total real curtailment, per-unit.
    pub objective: f64,
    pub loads: Vec<LoadServed>,
    pub bus_ids: Vec<usize>,
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    pub generators: Vec<GenDispatch>,
    pub devices: Vec<DeviceSetting>,
    pub activities: Vec<ConstraintActivity>,
    pub iterations: usize,
    pub multistart_index: usize,
    pub polished: bool,
    pub feascond: f64,
    pub compcond: f64,
    pub gradcond: f64,
}

impl CurtailmentResult {
    pub fn curtailment_at(&self, bus: usize) -> f64 {
        self.loads
            .iter()
            .filter(|l| l.bus == bus)
            .map(LoadServed::curtailment_p)
            .sum()
    }

    pub fn vm_at(&self, bus: usize) -> Option<f64> {
        self.bus_ids.iter().position(|&b| b == bus).map(|i| self.vm[i])
    }

    pub fn phasors(&self) -> Vec<num_complex::Complex64> {
        self.vm
            .iter()
            .zip(&self.va)
            .map(|(&m, &a)| num_complex::Complex64::from_polar(m, a))
            .collect()
    }

    pub fn binding(&self) -> impl Iterator<Item = &ConstraintActivity> {
        self.activities.iter().filter(|a| a.binding)
    }
}

#[derive(Debug, Error)]
pub enum OpfError {
    #[error("network invalid: {0}")]
    InvalidNetwork(String),
    #[error(transparent)]
    Outage(#[from] NetworkError),
    #[error("problem assembly failed: {0}")]
    Assembly(String),
    #[error("infeasible: maximum constraint violation {max_violation:.3e}")]
    Infeasible {
        max_violation: f64,
        result: Box<CurtailmentResult>,
    },
    #[error("solver did not converge within the iteration budget")]
    NotConverged { result: Box<CurtailmentResult> },
}

/// Minimize total curtailment on the network as-is.
pub fn solve_curtailment(
    network: &Network,
    lcrit: &LcritMap,
    options: &OpfOptions,
) -> Result<CurtailmentResult, OpfError> {
    let report = crate::netmodel::validate(network);
    if !report.is_valid() {
        return Err(OpfError::InvalidNetwork(report.violations.join("; ")));
    }

    let stage1 = CurtailProblem::new(network, lcrit, Objective::MinCurtailment, None)
        .map_err(OpfError::Assembly)?;

    let starts = build_starts(network, &stage1, options);
    let ipm_opts = options.ipm();

    let mut best: Option<(usize, IpmResult)> = None;
    let mut fallback: Option<(usize, IpmResult)> = None;
    for (k, x0) in starts.iter().enumerate() {
        let r = ipm::solve(&stage1, x0, &ipm_opts);
        if r.converged {
            let better = match &best {
                None => true,
                Some((_, b)) => r.objective < b.objective - 1e-9,
            };
            if better {
                best = Some((k, r));
            }
        } else {
            let closer = match &fallback {
                None => true,
                Some((_, f)) => r.feascond < f.feascond,
            };
            if closer {
                fallback = Some((k, r));
            }
        }
    }

    let (start_idx, winner) = match best {
        Some(w) => w,
        None => {
            let (k, r) = fallback.expect("at least one start attempted");
            let zero_load = stage1
                .load_records(&r.x)
                .iter()
                .all(|&(_, _, _, p, _)| p < options.feas_tol.sqrt());
            let result = assemble_result(&stage1, &r, k, false, SolveStatus::Infeasible);
            if r.feascond > options.feas_tol && zero_load {
                // not even shedding everything restores feasibility
                return Err(OpfError::Infeasible {
                    max_violation: r.feascond,
                    result: Box::new(result),
                });
            }
            if r.feascond > options.feas_tol {
                return Err(OpfError::Infeasible {
                    max_violation: r.feascond,
                    result: Box::new(result),
                });
            }
            let mut result = result;
            result.status = SolveStatus::NotConverged;
            return Err(OpfError::NotConverged { result: Box::new(result) });
        }
    };

    // polish: freeze the supplied loads, flatten the voltage profile
    if options.profile_polish {
        let supplied: Vec<f64> = stage1
            .load_records(&winner.x)
            .iter()
            .map(|&(_, _, _, p, _)| p)
            .collect();
        let target = network
            .slack_bus()
            .and_then(|b| b.v_setpoint)
            .unwrap_or(1.0);
        if let Ok(stage2) = CurtailProblem::new(
            network,
            lcrit,
            Objective::ProfilePolish { target, effort_weight: options.polish_effort_weight },
            Some(&supplied),
        ) {
            let op = stage1.operating_point(&winner.x);
            let x0 = stage2.initial_point(&op.vm, &op.va, Some(&op.gen_q), 1.0);
            let x0 = copy_controls(&stage1, &stage2, &winner.x, x0);
            let r2 = ipm::solve(&stage2, &x0, &ipm_opts);
            if r2.converged {
                let mut result =
                    assemble_result(&stage2, &r2, start_idx, true, SolveStatus::Optimal);
                result.iterations = winner.iterations + r2.iterations;
                return Ok(result);
            }
        }
    }

    Ok(assemble_result(&stage1, &winner, start_idx, false, SolveStatus::Optimal))
}

/// Apply the outage, then minimize curtailment on the post-contingency
/// network.
pub fn solve_contingency_curtailment(
    network: &Network,
    outage: (usize, usize),
    lcrit: &LcritMap,
    options: &OpfOptions,
) -> Result<CurtailmentResult, OpfError> {
    let contingent = network.apply_outage(outage.0, outage.1)?;
    solve_curtailment(&contingent, lcrit, options)
}

/// Per-constraint activity table for a solved case.
pub fn kkt_report(result: &CurtailmentResult) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "status: {:?}  objective: {:.6} pu  feas: {:.2e}  comp: {:.2e}\n",
        result.status, result.objective, result.feascond, result.compcond
    ));
    out.push_str("constraint, value, bound, multiplier, binding\n");
    for a in &result.activities {
        out.push_str(&format!(
            "{}, {:.4}, {:.4}, {:.4}, {}\n",
            a.name,
            a.value,
            a.bound,
            a.multiplier,
            if a.binding { "yes" } else { "no" }
        ));
    }
    out
}

fn copy_controls(
    from: &CurtailProblem<'_>,
    to: &CurtailProblem<'_>,
    x_from: &DVector<f64>,
    mut x_to: DVector<f64>,
) -> DVector<f64> {
    // stage-2 drops the load variables; every other variable keeps its
    // name, so transfer by name
    for i in 0..to.num_vars() {
        let name = to.var_name(i);
        if let Some(j) = (0..from.num_vars()).find(|&j| from.var_name(j) == name) {
            x_to[i] = x_from[j];
        }
    }
    x_to
}

fn build_starts(
    network: &Network,
    problem: &CurtailProblem<'_>,
    options: &OpfOptions,
) -> Vec<DVector<f64>> {
    let n_bus = problem.ybus.n();
    let mut starts = Vec::new();

    // start 0: full-load power flow when it converges, otherwise flat
    // voltages with partial load
    let pf = solve_power_flow(network, &PowerFlowOptions::default());
    match pf {
        Ok(sol) => {
            let gen_q: Vec<f64> = network
                .generators
                .iter()
                .map(|g| estimate_gen_q(network, &sol, g.bus))
                .collect();
            starts.push(problem.initial_point(&sol.vm, &sol.va, Some(&gen_q), 1.0));
        }
        Err(_) => {
            let vm = vec![1.0; n_bus];
            let va = vec![0.0; n_bus];
            starts.push(problem.initial_point(&vm, &va, None, options.fallback_load_scale));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    while starts.len() < options.multistart.max(1) {
        let mut vm = vec![1.0; n_bus];
        let mut va = vec![0.0; n_bus];
        for i in 0..n_bus {
            vm[i] += rng.gen_range(-0.05..0.05);
            va[i] += rng.gen_range(-0.15..0.15);
        }
        let scale = rng.gen_range(0.5..1.0);
        let mut x = problem.initial_point(&vm, &va, None, scale);
        // randomize device controls inside their boxes
        for i in 0..problem.num_vars() {
            let name = problem.var_name(i);
            if name.starts_with("vt ") {
                let (lo, hi) = (0.0, x_max_of(problem, i));
                x[i] = rng.gen_range(lo..hi.max(1e-9));
            } else if name.starts_with("phi ") {
                x[i] = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            } else if name.starts_with("iq ") {
                let hi = x_max_of(problem, i);
                let lo = x_min_of(problem, i);
                x[i] = 0.3 * rng.gen_range(lo..hi.max(lo + 1e-9));
            }
        }
        starts.push(x);
    }
    starts
}

fn x_max_of(problem: &CurtailProblem<'_>, i: usize) -> f64 {
    let (_, hi) = problem.bounds();
    hi[i]
}

fn x_min_of(problem: &CurtailProblem<'_>, i: usize) -> f64 {
    let (lo, _) = problem.bounds();
    lo[i]
}

fn estimate_gen_q(network: &Network, sol: &crate::powerflow::PowerFlowSolution, bus: usize) -> f64 {
    // net reactive injection at the generator bus plus local load
    let ybus = crate::admittance::build_ybus(network);
    let i = match ybus.index_of(bus) {
        Some(i) => i,
        None => return 0.0,
    };
    let v = sol.phasors();
    let mut s = num_complex::Complex64::new(0.0, 0.0);
    for c in 0..v.len() {
        s += v[i] * (ybus.get(i, c) * v[c]).conj();
    }
    let local_q: f64 = network
        .loads
        .iter()
        .filter(|l| l.bus == bus)
        .map(|l| l.q_req)
        .sum();
    s.im + local_q
}

fn assemble_result(
    problem: &CurtailProblem<'_>,
    ipm: &IpmResult,
    start_idx: usize,
    polished: bool,
    status: SolveStatus,
) -> CurtailmentResult {
    let op = problem.operating_point(&ipm.x);
    let loads = problem
        .load_records(&ipm.x)
        .into_iter()
        .map(|(bus, p_req, q_req, p, q)| LoadServed {
            bus,
            p_required: p_req,
            q_required: q_req,
            p_supplied: p,
            q_supplied: q,
        })
        .collect::<Vec<_>>();
    let objective: f64 = loads.iter().map(LoadServed::curtailment_p).sum();
    let generators = problem
        .net
        .generators
        .iter()
        .zip(op.gen_p.iter().zip(&op.gen_q))
        .map(|(g, (&p, &q))| GenDispatch { bus: g.bus, p, q })
        .collect();
    let devices = problem
        .net
        .facts_devices
        .iter()
        .zip(&op.controls)
        .map(|(d, &controls)| {
            let k = problem.net.find_branch(d.i_bus, d.j_bus).unwrap();
            let ys = d.effective_admittance(problem.net.branches[k].series_admittance());
            let mut dev = d.clone();
            dev.controls = controls;
            let ii = problem.ybus.index_of(d.i_bus).unwrap();
            let jj = problem.ybus.index_of(d.j_bus).unwrap();
            let (injections, _) = crate::facts::injections_with_partials(
                &dev,
                ys,
                op.vm[ii],
                op.va[ii],
                op.vm[jj],
                op.va[jj],
            );
            DeviceSetting {
                kind: d.kind,
                i_bus: d.i_bus,
                j_bus: d.j_bus,
                controls,
                injections,
            }
        })
        .collect();
    let activities = problem.activities(&ipm.x, &ipm.lam_eq, &ipm.mu_ineq, 1e-4);
    CurtailmentResult {
        status,
        objective,
        loads,
        bus_ids: problem.ybus.bus_ids.clone(),
        vm: op.vm,
        va: op.va,
        generators,
        devices,
        activities,
        iterations: ipm.iterations,
        multistart_index: start_idx,
        polished,
        feascond: ipm.feascond,
        compcond: ipm.compcond,
        gradcond: ipm.gradcond,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caseio;
    use crate::facts::{Bounds, FactsDevice};

    fn wscc9_opf() -> Network {
        caseio::parse_case(include_str!("../../data/wscc9_opf.case")).unwrap().0
    }

    fn rated_upfc(i: usize, j: usize, rating: f64) -> FactsDevice {
        let mut d = FactsDevice::new(DeviceKind::Upfc, i, j);
        d.limits.p_inj = Bounds::symmetric(rating);
        d.limits.q_inj1 = Bounds::symmetric(rating);
        d.limits.q_inj2 = Bounds::symmetric(rating);
        d
    }

    #[test]
    fn unconstrained_case_serves_everything() {
        let net = wscc9_opf();
        let lcrit = LcritMap::uniform(1.0);
        let r = solve_curtailment(&net, &lcrit, &OpfOptions::default()).unwrap();
        assert!(r.objective < 1e-6, "curtailment {:.3e}", r.objective);
        for l in &r.loads {
            assert!((l.p_supplied - l.p_required).abs() < 1e-6);
        }
    }

    #[test]
    fn strict_margin_forces_bus5_shedding() {
        let net = wscc9_opf();
        let lcrit = LcritMap::parse("5=0.1,7=0.3,9=0.3").unwrap();
        let r = solve_curtailment(&net, &lcrit, &OpfOptions::default()).unwrap();
        assert!((r.objective - 0.3592).abs() < 0.01, "objective {:.4}", r.objective);
        assert!(r.curtailment_at(5) > 0.9 * r.objective);
        // power factor rule holds exactly by construction
        for l in &r.loads {
            if l.q_required > 0.0 {
                let lhs = l.p_supplied / l.p_required;
                let rhs = l.q_supplied / l.q_required;
                assert!((lhs - rhs).abs() < 1e-8);
            }
        }
        // the L constraint at bus 5 is the binding mechanism
        assert!(r
            .activities
            .iter()
            .any(|a| a.name == "L bus 5" && a.binding && (a.value - 0.1).abs() < 1e-3));
    }

    #[test]
    fn upfc_pair_relieves_bus5() {
        let mut net = wscc9_opf();
        let mut d1 = rated_upfc(5, 6, 0.25);
        d1.limits.v_t_max = 0.2;
        let mut d2 = rated_upfc(4, 5, 0.25);
        d2.limits.v_t_max = 0.2;
        net.facts_devices.push(d1);
        net.facts_devices.push(d2);
        let lcrit = LcritMap::parse("5=0.1,7=0.3,9=0.3").unwrap();
        let r = solve_curtailment(&net, &lcrit, &OpfOptions::default()).unwrap();
        assert!(r.objective < 0.06, "objective {:.4}", r.objective);
    }

    #[test]
    fn zero_rated_device_reproduces_base_optimum() {
        let net = wscc9_opf();
        let lcrit = LcritMap::parse("5=0.1,7=0.3,9=0.3").unwrap();
        let base = solve_curtailment(&net, &lcrit, &OpfOptions::default()).unwrap();

        let mut with_dev = net.clone();
        let mut d = FactsDevice::new(DeviceKind::Upfc, 8, 9);
        d.limits.v_t_max = 0.0;
        d.limits.i_q = Bounds { min: 0.0, max: 0.0 };
        with_dev.facts_devices.push(d);
        let r = solve_curtailment(&with_dev, &lcrit, &OpfOptions::default()).unwrap();
        assert!((r.objective - base.objective).abs() < 1e-6);
    }

    #[test]
    fn contingency_interface_rejects_islanding() {
        let net = wscc9_opf();
        let lcrit = LcritMap::uniform(1.0);
        let err =
            solve_contingency_curtailment(&net, (1, 4), &lcrit, &OpfOptions::default()).unwrap_err();
        assert!(matches!(err, OpfError::Outage(NetworkError::Islanding { bus: 1 })));
    }

    #[test]
    fn kkt_report_lists_binding_rows() {
        let net = wscc9_opf();
        let lcrit = LcritMap::parse("5=0.1,7=0.3,9=0.3").unwrap();
        let r = solve_curtailment(&net, &lcrit, &OpfOptions::default()).unwrap();
        let report = kkt_report(&r);
        assert!(report.contains("L bus 5"));
        assert!(report.contains("yes"));
    }
}
