//! Newton-Raphson AC power flow in polar form with fixed-control FACTS
//! injections folded into the bus balances and the Jacobian.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::admittance::{build_ybus, YBus};
use crate::facts::{injections_with_partials, FactsDevice, Injections};
use crate::netmodel::{BusKind, Network};

#[derive(Debug, Clone)]
pub struct PowerFlowOptions {
    /// Convergence threshold on the mismatch infinity norm.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Newton step halvings tried when a full step increases the mismatch.
    pub max_step_halvings: usize,
    /// Starting phasors by ascending bus id; flat start when `None`.
    pub warm_start: Option<Vec<Complex64>>,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tolerance: 1e-8,
            max_iterations: 30,
            max_step_halvings: 4,
            warm_start: None,
        }
    }
}

/// Flow record at both ends of an in-service branch. The `p`/`q` values
/// are the power entering the line at that terminal.
#[derive(Debug, Clone)]
pub struct BranchFlow {
    pub from_bus: usize,
    pub to_bus: usize,
    pub p_from: f64,
    pub q_from: f64,
    pub s_from: f64,
    pub p_to: f64,
    pub q_to: f64,
    pub s_to: f64,
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    /// Ascending bus ids; all per-bus vectors use this order.
    pub bus_ids: Vec<usize>,
    pub vm: Vec<f64>,
    /// Bus angles, radians.
    pub va: Vec<f64>,
    pub flows: Vec<BranchFlow>,
    /// Net injection the slack bus supplies (generation minus local load).
    pub slack_p: f64,
    pub slack_q: f64,
    pub iterations: usize,
    pub final_mismatch: f64,
}

impl PowerFlowSolution {
    pub fn phasors(&self) -> Vec<Complex64> {
        self.vm
            .iter()
            .zip(&self.va)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }

    pub fn bus_index(&self, bus_id: usize) -> Option<usize> {
        self.bus_ids.iter().position(|&b| b == bus_id)
    }

    pub fn flow(&self, a: usize, b: usize) -> Option<&BranchFlow> {
        self.flows
            .iter()
            .find(|f| (f.from_bus == a && f.to_bus == b) || (f.from_bus == b && f.to_bus == a))
    }

    /// Signed flow entering the line at bus `a` of branch `a`-`b`.
    pub fn directed_flow(&self, a: usize, b: usize) -> Option<(f64, f64, f64)> {
        let f = self.flow(a, b)?;
        if f.from_bus == a {
            Some((f.p_from, f.q_from, f.s_from))
        } else {
            Some((f.p_to, f.q_to, f.s_to))
        }
    }
}

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("power flow diverged after {iterations} iterations (final mismatch {final_mismatch:.3e})")]
    Diverged {
        iterations: usize,
        final_mismatch: f64,
        /// Last iterate, usable for collapse diagnostics.
        last: Box<PowerFlowSolution>,
        mismatch_history: Vec<f64>,
    },
    #[error("singular power flow Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("network invalid: {0}")]
    InvalidNetwork(String),
}

struct DeviceCtx<'a> {
    device: &'a FactsDevice,
    i_idx: usize,
    j_idx: usize,
    ys: Complex64,
}

/// Everything the mismatch evaluation needs, fixed over the solve.
struct PfContext<'a> {
    ybus: YBus,
    kinds: Vec<BusKind>,
    p_sched: Vec<f64>,
    q_sched: Vec<f64>,
    devices: Vec<DeviceCtx<'a>>,
    /// Row layout: angle unknowns at these bus indices...
    ang_idx: Vec<usize>,
    /// ...then magnitude unknowns at these.
    mag_idx: Vec<usize>,
}

impl<'a> PfContext<'a> {
    fn new(network: &'a Network) -> Result<PfContext<'a>, PowerFlowError> {
        let report = crate::netmodel::validate(network);
        if !report.is_valid() {
            return Err(PowerFlowError::InvalidNetwork(
                report.violations.join("; "),
            ));
        }
        let ybus = build_ybus(network);
        let n = ybus.n();
        let mut kinds = vec![BusKind::Pq; n];
        for bus in &network.buses {
            kinds[ybus.index_of(bus.id).unwrap()] = bus.kind;
        }
        let mut p_sched = vec![0.0; n];
        let mut q_sched = vec![0.0; n];
        for g in &network.generators {
            p_sched[ybus.index_of(g.bus).unwrap()] += g.p_setpoint;
        }
        for l in &network.loads {
            let i = ybus.index_of(l.bus).unwrap();
            p_sched[i] -= l.p_req;
            q_sched[i] -= l.q_req;
        }
        let mut devices = Vec::new();
        for d in &network.facts_devices {
            let br = network
                .find_branch(d.i_bus, d.j_bus)
                .map(|k| &network.branches[k])
                .ok_or_else(|| {
                    PowerFlowError::InvalidNetwork(format!(
                        "device terminals {}-{} match no branch",
                        d.i_bus, d.j_bus
                    ))
                })?;
            devices.push(DeviceCtx {
                device: d,
                i_idx: ybus.index_of(d.i_bus).unwrap(),
                j_idx: ybus.index_of(d.j_bus).unwrap(),
                ys: d.effective_admittance(br.series_admittance()),
            });
        }
        let ang_idx: Vec<usize> = (0..n).filter(|&i| kinds[i] != BusKind::Slack).collect();
        let mag_idx: Vec<usize> = (0..n).filter(|&i| kinds[i] == BusKind::Pq).collect();
        Ok(PfContext {
            ybus,
            kinds,
            p_sched,
            q_sched,
            devices,
            ang_idx,
            mag_idx,
        })
    }

    fn n_unknowns(&self) -> usize {
        self.ang_idx.len() + self.mag_idx.len()
    }

    /// Net calculated complex injection at every bus for the given state.
    fn calc_injections(&self, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.ybus.n();
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for (i, k, y) in self.ybus.iter() {
            let s = v[i] * (y * v[k]).conj();
            p[i] += s.re;
            q[i] += s.im;
        }
        (p, q)
    }

    /// FACTS injections summed per bus for the given state.
    fn facts_injections(&self, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.ybus.n();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for d in &self.devices {
            let (inj, _) = injections_with_partials(
                d.device,
                d.ys,
                vm[d.i_idx],
                va[d.i_idx],
                vm[d.j_idx],
                va[d.j_idx],
            );
            p[d.i_idx] += inj.p_i;
            q[d.i_idx] += inj.q_i1 + inj.q_i2;
            p[d.j_idx] += inj.p_j;
            q[d.j_idx] += inj.q_j;
        }
        (p, q)
    }

    /// Mismatch vector: scheduled + device injections minus calculated,
    /// rows `[dP(ang_idx); dQ(mag_idx)]`.
    fn mismatch(&self, vm: &[f64], va: &[f64]) -> DVector<f64> {
        let (pc, qc) = self.calc_injections(vm, va);
        let (pf, qf) = self.facts_injections(vm, va);
        let mut f = DVector::zeros(self.n_unknowns());
        for (r, &i) in self.ang_idx.iter().enumerate() {
            f[r] = self.p_sched[i] + pf[i] - pc[i];
        }
        let na = self.ang_idx.len();
        for (r, &i) in self.mag_idx.iter().enumerate() {
            f[na + r] = self.q_sched[i] + qf[i] - qc[i];
        }
        f
    }

    /// Jacobian of `calc - facts` with respect to the unknowns, so the
    /// Newton step solves `J dx = f`.
    fn jacobian(&self, vm: &[f64], va: &[f64]) -> DMatrix<f64> {
        let n = self.ybus.n();
        let nu = self.n_unknowns();
        let na = self.ang_idx.len();
        let mut col_of_ang = vec![usize::MAX; n];
        let mut col_of_mag = vec![usize::MAX; n];
        for (c, &i) in self.ang_idx.iter().enumerate() {
            col_of_ang[i] = c;
        }
        for (c, &i) in self.mag_idx.iter().enumerate() {
            col_of_mag[i] = na + c;
        }
        let mut row_of_p = vec![usize::MAX; n];
        let mut row_of_q = vec![usize::MAX; n];
        for (r, &i) in self.ang_idx.iter().enumerate() {
            row_of_p[i] = r;
        }
        for (r, &i) in self.mag_idx.iter().enumerate() {
            row_of_q[i] = na + r;
        }

        let mut jac = DMatrix::zeros(nu, nu);
        let (pc, qc) = self.calc_injections(vm, va);

        // Y-based partial derivatives of the calculated injections.
        for (i, k, y) in self.ybus.iter() {
            let (g, b) = (y.re, y.im);
            if i == k {
                let dp_dth = -qc[i] - b * vm[i] * vm[i];
                let dp_dvm = pc[i] / vm[i] + g * vm[i];
                let dq_dth = pc[i] - g * vm[i] * vm[i];
                let dq_dvm = qc[i] / vm[i] - b * vm[i];
                if row_of_p[i] != usize::MAX && col_of_ang[i] != usize::MAX {
                    jac[(row_of_p[i], col_of_ang[i])] += dp_dth;
                }
                if row_of_p[i] != usize::MAX && col_of_mag[i] != usize::MAX {
                    jac[(row_of_p[i], col_of_mag[i])] += dp_dvm;
                }
                if row_of_q[i] != usize::MAX && col_of_ang[i] != usize::MAX {
                    jac[(row_of_q[i], col_of_ang[i])] += dq_dth;
                }
                if row_of_q[i] != usize::MAX && col_of_mag[i] != usize::MAX {
                    jac[(row_of_q[i], col_of_mag[i])] += dq_dvm;
                }
            } else {
                // the theta_i diagonal is already complete via the totals
                // in the i == k branch; only the k columns remain
                let th = va[i] - va[k];
                let (s, c) = th.sin_cos();
                let dp_dth_k = vm[i] * vm[k] * (g * s - b * c);
                let dp_dvm_k = vm[i] * (g * c + b * s);
                let dq_dth_k = -vm[i] * vm[k] * (g * c + b * s);
                let dq_dvm_k = vm[i] * (g * s - b * c);
                if row_of_p[i] != usize::MAX {
                    if col_of_ang[k] != usize::MAX {
                        jac[(row_of_p[i], col_of_ang[k])] += dp_dth_k;
                    }
                    if col_of_mag[k] != usize::MAX {
                        jac[(row_of_p[i], col_of_mag[k])] += dp_dvm_k;
                    }
                }
                if row_of_q[i] != usize::MAX {
                    if col_of_ang[k] != usize::MAX {
                        jac[(row_of_q[i], col_of_ang[k])] += dq_dth_k;
                    }
                    if col_of_mag[k] != usize::MAX {
                        jac[(row_of_q[i], col_of_mag[k])] += dq_dvm_k;
                    }
                }
            }
        }

        // FACTS partials enter with opposite sign: rows are d(calc-facts).
        for d in &self.devices {
            let (_, par) = injections_with_partials(
                d.device,
                d.ys,
                vm[d.i_idx],
                va[d.i_idx],
                vm[d.j_idx],
                va[d.j_idx],
            );
            let mut sub = |row: usize, col: usize, val: f64| {
                if row != usize::MAX && col != usize::MAX {
                    jac[(row, col)] -= val;
                }
            };
            let per_var = [
                (col_of_ang[d.i_idx], par.d_th_i),
                (col_of_ang[d.j_idx], par.d_th_j),
                (col_of_mag[d.i_idx], par.d_vm_i),
                (col_of_mag[d.j_idx], par.d_vm_j),
            ];
            for (col, pj) in per_var {
                sub(row_of_p[d.i_idx], col, pj.p_i);
                sub(row_of_q[d.i_idx], col, pj.q_i1 + pj.q_i2);
                sub(row_of_p[d.j_idx], col, pj.p_j);
                sub(row_of_q[d.j_idx], col, pj.q_j);
            }
        }
        jac
    }
}

/// Solve the AC power flow. FACTS devices keep the controls stored on
/// them; their injections and partials enter the balances directly.
pub fn solve_power_flow(
    network: &Network,
    options: &PowerFlowOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let ctx = PfContext::new(network)?;
    let n = ctx.ybus.n();

    let mut vm = vec![1.0; n];
    let mut va = vec![0.0; n];
    for bus in &network.buses {
        let i = ctx.ybus.index_of(bus.id).unwrap();
        if bus.kind != BusKind::Pq {
            vm[i] = bus.v_setpoint.unwrap_or(1.0);
        }
    }
    if let Some(start) = &options.warm_start {
        if start.len() == n {
            for i in 0..n {
                if ctx.kinds[i] == BusKind::Pq {
                    vm[i] = start[i].norm();
                }
                if ctx.kinds[i] != BusKind::Slack {
                    va[i] = start[i].arg();
                }
            }
        }
    }

    let mut history = Vec::new();
    let mut f = ctx.mismatch(&vm, &va);
    let mut norm = f.amax();
    history.push(norm);

    let mut iterations = 0;
    while norm >= options.tolerance && iterations < options.max_iterations {
        iterations += 1;
        let jac = ctx.jacobian(&vm, &va);
        let lu = jac.full_piv_lu();
        let dx = match lu.solve(&f) {
            Some(dx) if dx.iter().all(|v| v.is_finite()) => dx,
            _ => return Err(PowerFlowError::SingularJacobian { iteration: iterations }),
        };

        // damped update: halve the step while the mismatch norm grows
        let mut alpha = 1.0;
        let na = ctx.ang_idx.len();
        let mut best = None;
        for _ in 0..=options.max_step_halvings {
            let mut vm_t = vm.clone();
            let mut va_t = va.clone();
            for (c, &i) in ctx.ang_idx.iter().enumerate() {
                va_t[i] += alpha * dx[c];
            }
            for (c, &i) in ctx.mag_idx.iter().enumerate() {
                vm_t[i] += alpha * dx[na + c];
            }
            let f_t = ctx.mismatch(&vm_t, &va_t);
            let n_t = f_t.amax();
            best = Some((vm_t, va_t, f_t, n_t));
            if n_t < norm {
                break;
            }
            alpha /= 2.0;
        }
        let (vm_t, va_t, f_t, n_t) = best.unwrap();
        vm = vm_t;
        va = va_t;
        f = f_t;
        norm = n_t;
        history.push(norm);
    }

    let solution = assemble_solution(network, &ctx, vm, va, iterations, norm);
    if norm < options.tolerance {
        Ok(solution)
    } else {
        Err(PowerFlowError::Diverged {
            iterations,
            final_mismatch: norm,
            last: Box::new(solution),
            mismatch_history: history,
        })
    }
}

fn assemble_solution(
    network: &Network,
    ctx: &PfContext<'_>,
    vm: Vec<f64>,
    va: Vec<f64>,
    iterations: usize,
    final_mismatch: f64,
) -> PowerFlowSolution {
    let flows = branch_flows(network, &vm, &va, &ctx.ybus);
    let (pc, qc) = ctx.calc_injections(&vm, &va);
    let (pf, qf) = ctx.facts_injections(&vm, &va);
    let slack = network.slack_bus().map(|b| ctx.ybus.index_of(b.id).unwrap());
    // generation at the slack bus = calculated injection + local load - device terms
    let (slack_p, slack_q) = match slack {
        Some(i) => {
            let (lp, lq) = loads_at(network, ctx, i);
            (pc[i] + lp - pf[i], qc[i] + lq - qf[i])
        }
        None => (0.0, 0.0),
    };
    PowerFlowSolution {
        bus_ids: ctx.ybus.bus_ids.clone(),
        vm,
        va,
        flows,
        slack_p,
        slack_q,
        iterations,
        final_mismatch,
    }
}

fn loads_at(network: &Network, ctx: &PfContext<'_>, idx: usize) -> (f64, f64) {
    let mut p = 0.0;
    let mut q = 0.0;
    for l in &network.loads {
        if ctx.ybus.index_of(l.bus) == Some(idx) {
            p += l.p_req;
            q += l.q_req;
        }
    }
    (p, q)
}

/// Pi-model terminal flows for every in-service branch.
pub fn branch_flows(
    network: &Network,
    vm: &[f64],
    va: &[f64],
    ybus: &YBus,
) -> Vec<BranchFlow> {
    let mut out = Vec::new();
    for br in network.in_service_branches() {
        let i = ybus.index_of(br.from_bus).unwrap();
        let j = ybus.index_of(br.to_bus).unwrap();
        let vi = Complex64::from_polar(vm[i], va[i]);
        let vj = Complex64::from_polar(vm[j], va[j]);
        let ys = br.series_admittance();
        let ych = Complex64::new(0.0, br.charging / 2.0);
        let s_from = vi * (ys * (vi - vj) + ych * vi).conj();
        let s_to = vj * (ys * (vj - vi) + ych * vj).conj();
        out.push(BranchFlow {
            from_bus: br.from_bus,
            to_bus: br.to_bus,
            p_from: s_from.re,
            q_from: s_from.im,
            s_from: s_from.norm(),
            p_to: s_to.re,
            q_to: s_to.im,
            s_to: s_to.norm(),
        });
    }
    out
}

/// Sum of per-device net injections at the solved state; used by balance
/// checks and reports.
pub fn total_device_injection(network: &Network, solution: &PowerFlowSolution) -> (f64, f64) {
    let mut p = 0.0;
    let mut q = 0.0;
    for d in &network.facts_devices {
        if let Some(k) = network.find_branch(d.i_bus, d.j_bus) {
            let ys = d.effective_admittance(network.branches[k].series_admittance());
            let i = solution.bus_index(d.i_bus).unwrap();
            let j = solution.bus_index(d.j_bus).unwrap();
            let (inj, _): (Injections, _) = injections_with_partials(
                d,
                ys,
                solution.vm[i],
                solution.va[i],
                solution.vm[j],
                solution.va[j],
            );
            p += inj.p_i + inj.p_j;
            q += inj.q_i1 + inj.q_i2 + inj.q_j;
        }
    }
    (p, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caseio;
    use crate::facts::{DeviceControls, DeviceKind};
    use approx::assert_abs_diff_eq;

    fn wscc9() -> Network {
        caseio::parse_case(include_str!("../data/wscc9.case")).unwrap().0
    }

    #[test]
    fn base_case_matches_reference() {
        let net = wscc9();
        let sol = solve_power_flow(&net, &PowerFlowOptions::default()).unwrap();
        let i9 = sol.bus_index(9).unwrap();
        // frozen from an independent numeric-Jacobian implementation
        assert_abs_diff_eq!(sol.vm[i9], 0.9397314982, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.va[i9], -0.0767101044, epsilon = 1e-7);
        let (p89, q89, _) = sol.directed_flow(8, 9).unwrap();
        assert_abs_diff_eq!(p89, 1.0855614401, epsilon = 1e-6);
        assert_abs_diff_eq!(q89, 0.0523323440, epsilon = 1e-6);
        assert!(sol.iterations <= 6);
    }

    #[test]
    fn outage_case_converges_into_collapse_region() {
        let net = wscc9().apply_outage(4, 9).unwrap();
        let sol = solve_power_flow(&net, &PowerFlowOptions::default()).unwrap();
        let i9 = sol.bus_index(9).unwrap();
        assert_abs_diff_eq!(sol.vm[i9], 0.6049483512, epsilon = 1e-6);
        let (p89, q89, _) = sol.directed_flow(8, 9).unwrap();
        assert_abs_diff_eq!(p89, 1.7183307977, epsilon = 1e-6);
        assert_abs_diff_eq!(q89, 1.5318498288, epsilon = 1e-6);
        let (p98, q98, _) = sol.directed_flow(9, 8).unwrap();
        assert_abs_diff_eq!(p98, -1.4967, epsilon = 1e-6);
        assert_abs_diff_eq!(q98, -0.5987, epsilon = 1e-6);
    }

    #[test]
    fn kcl_and_system_balance_hold() {
        for net in [wscc9(), wscc9().apply_outage(4, 9).unwrap()] {
            let sol = solve_power_flow(&net, &PowerFlowOptions::default()).unwrap();
            check_balances(&net, &sol);
        }
    }

    pub(crate) fn check_balances(net: &Network, sol: &PowerFlowSolution) {
        // total generation (non-slack setpoints plus solved slack output)
        // covers loads, series losses and net device injections
        let slack_bus = net.slack_bus().unwrap().id;
        let gen_p: f64 = net
            .generators
            .iter()
            .filter(|g| g.bus != slack_bus)
            .map(|g| g.p_setpoint)
            .sum();
        let load_p: f64 = net.loads.iter().map(|l| l.p_req).sum();
        let losses: f64 = sol.flows.iter().map(|f| f.p_from + f.p_to).sum();
        let (dev_p, _) = total_device_injection(net, sol);
        let balance = gen_p + sol.slack_p + dev_p - load_p - losses;
        assert!(balance.abs() < 1e-6, "system P balance off by {balance:.2e}");
    }

    #[test]
    fn warm_start_reconverges_fast() {
        let net = wscc9();
        let sol = solve_power_flow(&net, &PowerFlowOptions::default()).unwrap();
        let warm = PowerFlowOptions {
            warm_start: Some(sol.phasors()),
            ..Default::default()
        };
        let sol2 = solve_power_flow(&net, &warm).unwrap();
        assert!(sol2.iterations <= 2, "took {}", sol2.iterations);
    }

    #[test]
    fn no_load_flat_network_is_fixed_point() {
        let mut net = wscc9();
        net.loads.clear();
        for g in &mut net.generators {
            g.p_setpoint = 0.0;
        }
        for b in &mut net.branches {
            b.charging = 0.0;
        }
        let sol = solve_power_flow(&net, &PowerFlowOptions::default()).unwrap();
        assert!(sol.iterations <= 2);
        for i in 0..sol.vm.len() {
            assert_abs_diff_eq!(sol.vm[i], 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(sol.va[i], 0.0, epsilon = 1e-9);
        }
        for f in &sol.flows {
            assert!(f.s_from < 1e-9);
        }
    }

    #[test]
    fn zero_control_device_is_neutral() {
        let net = wscc9();
        let base = solve_power_flow(&net, &PowerFlowOptions::default()).unwrap();
        let mut with_dev = net.clone();
        with_dev
            .facts_devices
            .push(crate::facts::FactsDevice::new(DeviceKind::Upfc, 8, 9));
        let sol = solve_power_flow(&with_dev, &PowerFlowOptions::default()).unwrap();
        for i in 0..base.vm.len() {
            assert_abs_diff_eq!(base.vm[i], sol.vm[i], epsilon = 1e-10);
            assert_abs_diff_eq!(base.va[i], sol.va[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn device_shifts_the_operating_point_and_balances_close() {
        let mut net = wscc9();
        let mut dev = crate::facts::FactsDevice::new(DeviceKind::Upfc, 8, 9);
        dev.controls = DeviceControls { v_t: 0.08, phi_t: 0.4, i_q: -0.2 };
        net.facts_devices.push(dev);
        let sol = solve_power_flow(&net, &PowerFlowOptions::default()).unwrap();
        let base = solve_power_flow(&wscc9(), &PowerFlowOptions::default()).unwrap();
        let i9 = sol.bus_index(9).unwrap();
        assert!((sol.vm[i9] - base.vm[i9]).abs() > 1e-3);
        // KCL residual at every bus: sched + facts - calc
        let ctx_net = &net;
        let ybus = build_ybus(ctx_net);
        let v = sol.phasors();
        for (r, &bus) in sol.bus_ids.iter().enumerate() {
            if ctx_net.bus(bus).unwrap().kind != BusKind::Pq {
                continue;
            }
            let mut s = Complex64::new(0.0, 0.0);
            for c in 0..v.len() {
                s += v[r] * (ybus.get(r, c) * v[c]).conj();
            }
            let mut sched = Complex64::new(0.0, 0.0);
            for l in &ctx_net.loads {
                if l.bus == bus {
                    sched -= Complex64::new(l.p_req, l.q_req);
                }
            }
            let mut inj = Complex64::new(0.0, 0.0);
            for d in &ctx_net.facts_devices {
                let k = ctx_net.find_branch(d.i_bus, d.j_bus).unwrap();
                let ys = d.effective_admittance(ctx_net.branches[k].series_admittance());
                let ii = sol.bus_index(d.i_bus).unwrap();
                let jj = sol.bus_index(d.j_bus).unwrap();
                let (q, _) = injections_with_partials(d, ys, sol.vm[ii], sol.va[ii], sol.vm[jj], sol.va[jj]);
                if d.i_bus == bus {
                    inj += Complex64::new(q.p_i, q.q_i1 + q.q_i2);
                }
                if d.j_bus == bus {
                    inj += Complex64::new(q.p_j, q.q_j);
                }
            }
            let resid = sched + inj - s;
            assert!(resid.norm() < 1e-6, "KCL residual {:.2e} at bus {bus}", resid.norm());
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut net = wscc9();
        let mut dev = crate::facts::FactsDevice::new(DeviceKind::Upfc, 5, 6);
        dev.controls = DeviceControls { v_t: 0.1, phi_t: -0.7, i_q: 0.35 };
        net.facts_devices.push(dev);
        let ctx = PfContext::new(&net).unwrap();
        let n = ctx.ybus.n();
        let mut vm = vec![1.0; n];
        let mut va = vec![0.0; n];
        // a generic interior point away from flat start
        for i in 0..n {
            vm[i] = 0.96 + 0.01 * (i as f64);
            va[i] = -0.05 + 0.013 * (i as f64);
        }
        let jac = ctx.jacobian(&vm, &va);
        let h = 1e-6;
        let na = ctx.ang_idx.len();
        let nu = ctx.n_unknowns();
        for c in 0..nu {
            let mut vp = vm.clone();
            let mut ap = va.clone();
            let mut vn = vm.clone();
            let mut an = va.clone();
            if c < na {
                ap[ctx.ang_idx[c]] += h;
                an[ctx.ang_idx[c]] -= h;
            } else {
                vp[ctx.mag_idx[c - na]] += h;
                vn[ctx.mag_idx[c - na]] -= h;
            }
            let fp = ctx.mismatch(&vp, &ap);
            let fm = ctx.mismatch(&vn, &an);
            for r in 0..nu {
                // mismatch = sched + facts - calc, so d(mismatch) = -J
                let fd = -(fp[r] - fm[r]) / (2.0 * h);
                let scale = 1.0 + jac[(r, c)].abs();
                assert!(
                    (fd - jac[(r, c)]).abs() / scale < 1e-6,
                    "J[{r},{c}] analytic {} vs fd {}",
                    jac[(r, c)],
                    fd
                );
            }
        }
    }
}
