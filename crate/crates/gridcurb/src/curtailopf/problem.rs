//! Assembly of the curtailment NLP: variable layout, bounds, constraint
//! values and analytic Jacobians.
//!
//! Variables are bus angles (slack excluded), PQ-bus voltage magnitudes
//! (generator-bus magnitudes stay pinned at their scheduled setpoints),
//! generator P/Q, supplied real load per curtailable bus, and the active
//! controls of each FACTS device. Supplied reactive load is eliminated
//! through the constant-power-factor rule `Q_l = P_l * Qreq/Preq`, which
//! that constraint then satisfies exactly by construction.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::admittance::{build_ybus, partition, YBus};
use crate::curtailopf::ipm::NlpModel;
use crate::facts::{injections_with_partials, DeviceControls, DeviceKind, FactsDevice, Injections};
use crate::lindex::{participation_matrix, LcritMap};
use crate::netmodel::{BusKind, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Minimize total real curtailment.
    MinCurtailment,
    /// Minimize squared voltage deviation from the flat target plus a
    /// shunt-converter duty term on the quadrature currents; used by the
    /// post-optimization polish stage with loads frozen.
    ProfilePolish { target: f64, effort_weight: f64 },
}

struct GenVar {
    bus_idx: usize,
    p_var: usize,
    q_var: usize,
}

struct LoadVar {
    bus_idx: usize,
    p_req: f64,
    q_req: f64,
    /// Qreq/Preq; reactive supply follows the real supply.
    ratio: f64,
    /// Variable index, or `None` when the supplied level is frozen.
    p_var: Option<usize>,
    p_fixed: f64,
}

struct DevVar {
    device: FactsDevice,
    i_idx: usize,
    j_idx: usize,
    ys: Complex64,
    vt_var: Option<usize>,
    ph_var: Option<usize>,
    iq_var: Option<usize>,
}

struct ThermalRow {
    f_idx: usize,
    t_idx: usize,
    ys: Complex64,
    half_charge: f64,
    rating: f64,
    label: String,
}

struct LRow {
    bus_idx: usize,
    /// F-matrix row over the generator-bus ordering.
    f_row: Vec<Complex64>,
    gen_idx: Vec<usize>,
    l_crit: f64,
    label: String,
}

enum InjKind {
    PActive,
    QSeries,
    QShunt,
}

struct InjRow {
    dev: usize,
    kind: InjKind,
    upper: bool,
    bound: f64,
    label: String,
}

/// One named constraint with its value, bound and multiplier in natural
/// units, for diagnostics and the KKT report.
#[derive(Debug, Clone)]
pub struct ConstraintActivity {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub multiplier: f64,
    pub binding: bool,
}

/// Decoded operating state at some variable vector.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    pub gen_p: Vec<f64>,
    pub gen_q: Vec<f64>,
    pub load_p: Vec<f64>,
    pub controls: Vec<DeviceControls>,
}

pub struct CurtailProblem<'a> {
    pub net: &'a Network,
    pub ybus: YBus,
    kinds: Vec<BusKind>,
    n_bus: usize,
    th_of_bus: Vec<Option<usize>>,
    vm_of_bus: Vec<Option<usize>>,
    vm_fixed: Vec<f64>,
    gens: Vec<GenVar>,
    loads: Vec<LoadVar>,
    devs: Vec<DevVar>,
    thermal: Vec<ThermalRow>,
    lrows: Vec<LRow>,
    inj_rows: Vec<InjRow>,
    n_vars: usize,
    objective: Objective,
    var_names: Vec<String>,
    x_min: Vec<f64>,
    x_max: Vec<f64>,
}

impl<'a> CurtailProblem<'a> {
    /// Build the stage-1 problem. `fixed_loads` freezes the supplied real
    /// load per curtailable bus (stage-2 polish).
    pub fn new(
        net: &'a Network,
        lcrit: &LcritMap,
        objective: Objective,
        fixed_loads: Option<&[f64]>,
    ) -> Result<CurtailProblem<'a>, String> {
        let ybus = build_ybus(net);
        let n_bus = ybus.n();
        let mut kinds = vec![BusKind::Pq; n_bus];
        for bus in &net.buses {
            kinds[ybus.index_of(bus.id).unwrap()] = bus.kind;
        }

        let mut x_min = Vec::new();
        let mut x_max = Vec::new();
        let mut var_names = Vec::new();
        let push_var = |name: String, lo: f64, hi: f64, x_min: &mut Vec<f64>, x_max: &mut Vec<f64>, var_names: &mut Vec<String>| -> usize {
            x_min.push(lo);
            x_max.push(hi);
            var_names.push(name);
            x_min.len() - 1
        };

        let mut th_of_bus = vec![None; n_bus];
        let mut vm_of_bus = vec![None; n_bus];
        let mut vm_fixed = vec![1.0; n_bus];
        for (idx, &bus_id) in ybus.bus_ids.iter().enumerate() {
            let bus = net.bus(bus_id).unwrap();
            if bus.kind != BusKind::Slack {
                th_of_bus[idx] = Some(push_var(
                    format!("theta bus {bus_id}"),
                    f64::NEG_INFINITY,
                    f64::INFINITY,
                    &mut x_min,
                    &mut x_max,
                    &mut var_names,
                ));
            }
            if bus.kind == BusKind::Pq {
                vm_of_bus[idx] = Some(push_var(
                    format!("V bus {bus_id}"),
                    bus.v_min,
                    bus.v_max,
                    &mut x_min,
                    &mut x_max,
                    &mut var_names,
                ));
            } else {
                vm_fixed[idx] = bus.v_setpoint.unwrap_or(1.0);
            }
        }

        let mut gens = Vec::new();
        for g in &net.generators {
            let bus_idx = ybus.index_of(g.bus).ok_or("generator bus missing")?;
            let p_var = push_var(
                format!("Pg bus {}", g.bus),
                g.p_min,
                g.p_max,
                &mut x_min,
                &mut x_max,
                &mut var_names,
            );
            let q_var = push_var(
                format!("Qg bus {}", g.bus),
                g.q_min,
                g.q_max,
                &mut x_min,
                &mut x_max,
                &mut var_names,
            );
            gens.push(GenVar { bus_idx, p_var, q_var });
        }

        let mut loads = Vec::new();
        for (k, l) in net.loads.iter().enumerate() {
            let bus_idx = ybus.index_of(l.bus).ok_or("load bus missing")?;
            if l.p_req <= 0.0 {
                continue;
            }
            let ratio = l.q_req / l.p_req;
            let (p_var, p_fixed) = match fixed_loads {
                Some(vals) => (None, vals[k]),
                None => (
                    Some(push_var(
                        format!("Pl bus {}", l.bus),
                        0.0,
                        l.p_req,
                        &mut x_min,
                        &mut x_max,
                        &mut var_names,
                    )),
                    l.p_req,
                ),
            };
            loads.push(LoadVar {
                bus_idx,
                p_req: l.p_req,
                q_req: l.q_req,
                ratio,
                p_var,
                p_fixed,
            });
        }

        let mut devs = Vec::new();
        for d in &net.facts_devices {
            let br_idx = d
                .check_invariants()
                .is_empty()
                .then(|| net.find_branch(d.i_bus, d.j_bus))
                .flatten()
                .ok_or_else(|| format!("device {}-{} invalid or without host branch", d.i_bus, d.j_bus))?;
            let ys = d.effective_admittance(net.branches[br_idx].series_admittance());
            let series = d.kind.beta1() > 0.0 && d.limits.v_t_max > 0.0;
            let shunt = d.kind.beta2() > 0.0 && d.limits.i_q.min < d.limits.i_q.max;
            let tag = format!("{} {}-{}", d.kind, d.i_bus, d.j_bus);
            let vt_var = series.then(|| {
                push_var(format!("vt {tag}"), 0.0, d.limits.v_t_max, &mut x_min, &mut x_max, &mut var_names)
            });
            let ph_var = series.then(|| {
                push_var(format!("phi {tag}"), f64::NEG_INFINITY, f64::INFINITY, &mut x_min, &mut x_max, &mut var_names)
            });
            let iq_var = shunt.then(|| {
                push_var(format!("iq {tag}"), d.limits.i_q.min, d.limits.i_q.max, &mut x_min, &mut x_max, &mut var_names)
            });
            devs.push(DevVar {
                device: d.clone(),
                i_idx: ybus.index_of(d.i_bus).unwrap(),
                j_idx: ybus.index_of(d.j_bus).unwrap(),
                ys,
                vt_var,
                ph_var,
                iq_var,
            });
        }

        let mut thermal = Vec::new();
        for br in net.in_service_branches() {
            let f_idx = ybus.index_of(br.from_bus).unwrap();
            let t_idx = ybus.index_of(br.to_bus).unwrap();
            let ys = br.series_admittance();
            for (a, b, la, lb) in [(f_idx, t_idx, br.from_bus, br.to_bus), (t_idx, f_idx, br.to_bus, br.from_bus)] {
                thermal.push(ThermalRow {
                    f_idx: a,
                    t_idx: b,
                    ys,
                    half_charge: br.charging / 2.0,
                    rating: br.rating,
                    label: format!("thermal {la}-{lb}"),
                });
            }
        }

        let mut lrows = Vec::new();
        if let Ok(party) = partition(&ybus, net) {
            let f = participation_matrix(&party).map_err(|e| e.to_string())?;
            let gen_idx: Vec<usize> = party
                .gen_bus_ids
                .iter()
                .map(|&b| ybus.index_of(b).unwrap())
                .collect();
            for (r, &bus_id) in party.load_bus_ids.iter().enumerate() {
                lrows.push(LRow {
                    bus_idx: ybus.index_of(bus_id).unwrap(),
                    f_row: (0..gen_idx.len()).map(|c| f[(r, c)]).collect(),
                    gen_idx: gen_idx.clone(),
                    l_crit: lcrit.threshold(bus_id),
                    label: format!("L bus {bus_id}"),
                });
            }
        }

        let mut inj_rows = Vec::new();
        for (k, dv) in devs.iter().enumerate() {
            let d = &dv.device;
            let tag = format!("{} {}-{}", d.kind, d.i_bus, d.j_bus);
            let add = |kind: InjKind, upper: bool, bound: f64, eq: &str, rows: &mut Vec<InjRow>| {
                rows.push(InjRow {
                    dev: k,
                    kind,
                    upper,
                    bound,
                    label: format!("inj ({eq}) {} {tag}", if upper { "upper" } else { "lower" }),
                });
            };
            match d.kind {
                DeviceKind::Upfc => {
                    add(InjKind::PActive, true, d.limits.p_inj.max, "6", &mut inj_rows);
                    add(InjKind::PActive, false, d.limits.p_inj.min, "6", &mut inj_rows);
                    add(InjKind::QSeries, true, d.limits.q_inj1.max, "7", &mut inj_rows);
                    add(InjKind::QSeries, false, d.limits.q_inj1.min, "7", &mut inj_rows);
                    add(InjKind::QShunt, true, d.limits.q_inj2.max, "8", &mut inj_rows);
                    add(InjKind::QShunt, false, d.limits.q_inj2.min, "8", &mut inj_rows);
                }
                DeviceKind::Sssc => {
                    add(InjKind::PActive, true, d.limits.p_inj.max, "6", &mut inj_rows);
                    add(InjKind::PActive, false, d.limits.p_inj.min, "6", &mut inj_rows);
                }
                DeviceKind::Statcom => {
                    add(InjKind::QShunt, true, d.limits.q_inj2.max, "8", &mut inj_rows);
                    add(InjKind::QShunt, false, d.limits.q_inj2.min, "8", &mut inj_rows);
                }
            }
        }

        Ok(CurtailProblem {
            net,
            n_vars: x_min.len(),
            ybus,
            kinds,
            n_bus,
            th_of_bus,
            vm_of_bus,
            vm_fixed,
            gens,
            loads,
            devs,
            thermal,
            lrows,
            inj_rows,
            objective,
            var_names,
            x_min,
            x_max,
        })
    }

    pub fn num_loads(&self) -> usize {
        self.loads.len()
    }

    pub fn total_demand(&self) -> f64 {
        self.loads.iter().map(|l| l.p_req).sum()
    }

    pub fn var_name(&self, i: usize) -> &str {
        &self.var_names[i]
    }

    /// Decode the state encoded in `x`.
    pub fn operating_point(&self, x: &DVector<f64>) -> OperatingPoint {
        let (vm, va) = self.bus_state(x);
        OperatingPoint {
            vm,
            va,
            gen_p: self.gens.iter().map(|g| x[g.p_var]).collect(),
            gen_q: self.gens.iter().map(|g| x[g.q_var]).collect(),
            load_p: self
                .loads
                .iter()
                .map(|l| l.p_var.map_or(l.p_fixed, |v| x[v]))
                .collect(),
            controls: self.devs.iter().map(|d| self.controls_of(d, x)).collect(),
        }
    }

    pub fn load_records(&self, x: &DVector<f64>) -> Vec<(usize, f64, f64, f64, f64)> {
        self.loads
            .iter()
            .map(|l| {
                let p = l.p_var.map_or(l.p_fixed, |v| x[v]);
                (
                    self.ybus.bus_ids[l.bus_idx],
                    l.p_req,
                    l.q_req,
                    p,
                    p * l.ratio,
                )
            })
            .collect()
    }

    pub fn curtailment_total(&self, x: &DVector<f64>) -> f64 {
        self.loads
            .iter()
            .map(|l| l.p_req - l.p_var.map_or(l.p_fixed, |v| x[v]))
            .sum()
    }

    fn controls_of(&self, d: &DevVar, x: &DVector<f64>) -> DeviceControls {
        DeviceControls {
            v_t: d.vt_var.map_or(d.device.controls.v_t, |v| x[v]),
            phi_t: d.ph_var.map_or(d.device.controls.phi_t, |v| x[v]),
            i_q: d.iq_var.map_or(d.device.controls.i_q, |v| x[v]),
        }
    }

    fn bus_state(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut vm = self.vm_fixed.clone();
        let mut va = vec![0.0; self.n_bus];
        for i in 0..self.n_bus {
            if let Some(v) = self.vm_of_bus[i] {
                vm[i] = x[v];
            }
            if let Some(v) = self.th_of_bus[i] {
                va[i] = x[v];
            }
        }
        (vm, va)
    }

    fn device_injections(
        &self,
        d: &DevVar,
        x: &DVector<f64>,
        vm: &[f64],
        va: &[f64],
    ) -> (Injections, crate::facts::InjectionPartials) {
        let mut dev = d.device.clone();
        dev.controls = self.controls_of(d, x);
        injections_with_partials(&dev, d.ys, vm[d.i_idx], va[d.i_idx], vm[d.j_idx], va[d.j_idx])
    }

    /// Build an initial vector from a bus-state guess plus dispatch data.
    pub fn initial_point(
        &self,
        vm: &[f64],
        va: &[f64],
        gen_q: Option<&[f64]>,
        load_scale: f64,
    ) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_vars);
        for i in 0..self.n_bus {
            if let Some(v) = self.vm_of_bus[i] {
                x[v] = vm[i].clamp(self.x_min[v], self.x_max[v]);
            }
            if let Some(v) = self.th_of_bus[i] {
                x[v] = va[i];
            }
        }
        let total_setpoint: f64 = self.net.generators.iter().map(|g| g.p_setpoint).sum();
        let demand = self.total_demand();
        for (k, (gv, g)) in self.gens.iter().zip(&self.net.generators).enumerate() {
            let mut p = g.p_setpoint;
            if self.kinds[gv.bus_idx] == BusKind::Slack {
                p = (demand - (total_setpoint - g.p_setpoint)).max(0.0);
            }
            x[gv.p_var] = p.clamp(g.p_min, g.p_max);
            let q = gen_q.map_or(0.0, |qs| qs[k]);
            x[gv.q_var] = q.clamp(g.q_min, g.q_max);
        }
        for l in &self.loads {
            if let Some(v) = l.p_var {
                x[v] = (l.p_req * load_scale).clamp(0.0, l.p_req);
            }
        }
        for d in &self.devs {
            if let Some(v) = d.vt_var {
                // keep the series source strictly interior: at vt = 0 the
                // phase direction is gradient-free and quasi-Newton steps
                // stall against the bound
                let interior = (self.x_max[v] * 0.25).min(0.05);
                x[v] = d.device.controls.v_t.clamp(self.x_min[v], self.x_max[v]).max(interior);
            }
            if let Some(v) = d.ph_var {
                x[v] = d.device.controls.phi_t;
            }
            if let Some(v) = d.iq_var {
                x[v] = d.device.controls.i_q.clamp(self.x_min[v], self.x_max[v]);
            }
        }
        x
    }

    /// Natural-unit activity records for every constraint and variable
    /// bound, with multipliers where the solver produced them.
    pub fn activities(
        &self,
        x: &DVector<f64>,
        lam: &DVector<f64>,
        mu: &DVector<f64>,
        tol: f64,
    ) -> Vec<ConstraintActivity> {
        let (vm, va) = self.bus_state(x);
        let mut out = Vec::new();
        let mut g = DVector::zeros(self.num_eq_rows());
        let mut h = DVector::zeros(self.num_ineq_rows());
        let mut jg = DMatrix::zeros(self.num_eq_rows(), self.n_vars);
        let mut jh = DMatrix::zeros(self.num_ineq_rows(), self.n_vars);
        self.eval(x, &mut g, &mut h, &mut jg, &mut jh);

        for (r, &bus) in self.ybus.bus_ids.iter().enumerate() {
            out.push(ConstraintActivity {
                name: format!("P balance bus {bus}"),
                value: g[r],
                bound: 0.0,
                multiplier: lam.get(r).copied().unwrap_or(0.0),
                binding: true,
            });
            out.push(ConstraintActivity {
                name: format!("Q balance bus {bus}"),
                value: g[self.n_bus + r],
                bound: 0.0,
                multiplier: lam.get(self.n_bus + r).copied().unwrap_or(0.0),
                binding: true,
            });
        }
        let mut row = 0;
        for t in &self.thermal {
            let (p, q, _, _) = self.flow_at(t, &vm, &va);
            let s = p.hypot(q);
            out.push(ConstraintActivity {
                name: t.label.clone(),
                value: s,
                bound: t.rating,
                multiplier: mu.get(row).copied().unwrap_or(0.0),
                binding: (t.rating - s).abs() <= tol,
            });
            row += 1;
        }
        for l in &self.lrows {
            let w = self.w_of(l, &vm, &va);
            let lval = w.norm() / vm[l.bus_idx];
            out.push(ConstraintActivity {
                name: l.label.clone(),
                value: lval,
                bound: l.l_crit,
                multiplier: mu.get(row).copied().unwrap_or(0.0),
                binding: (l.l_crit - lval).abs() <= tol,
            });
            row += 1;
        }
        for ir in &self.inj_rows {
            let d = &self.devs[ir.dev];
            let (inj, _) = self.device_injections(d, x, &vm, &va);
            let value = match ir.kind {
                InjKind::PActive => inj.p_i,
                InjKind::QSeries => inj.q_i1,
                InjKind::QShunt => inj.q_i2,
            };
            out.push(ConstraintActivity {
                name: ir.label.clone(),
                value,
                bound: ir.bound,
                multiplier: mu.get(row).copied().unwrap_or(0.0),
                binding: (ir.bound - value).abs() <= tol,
            });
            row += 1;
        }
        // variable bounds
        for (i, name) in self.var_names.iter().enumerate() {
            for (bound, upper) in [(self.x_max[i], true), (self.x_min[i], false)] {
                if bound.is_finite() && (x[i] - bound).abs() <= tol {
                    out.push(ConstraintActivity {
                        name: format!("{name} {}", if upper { "upper" } else { "lower" }),
                        value: x[i],
                        bound,
                        multiplier: 0.0,
                        binding: true,
                    });
                }
            }
        }
        out
    }

    fn num_eq_rows(&self) -> usize {
        2 * self.n_bus
    }

    fn num_ineq_rows(&self) -> usize {
        self.thermal.len() + self.lrows.len() + self.inj_rows.len()
    }

    fn w_of(&self, l: &LRow, vm: &[f64], va: &[f64]) -> Complex64 {
        let vj = Complex64::from_polar(vm[l.bus_idx], va[l.bus_idx]);
        let mut acc = Complex64::new(0.0, 0.0);
        for (f, &gi) in l.f_row.iter().zip(&l.gen_idx) {
            acc += f * Complex64::from_polar(vm[gi], va[gi]);
        }
        vj - acc
    }

    /// Terminal flow of a thermal row plus its value-level partial inputs.
    fn flow_at(&self, t: &ThermalRow, vm: &[f64], va: &[f64]) -> (f64, f64, f64, f64) {
        let (g, b) = (t.ys.re, t.ys.im);
        let (vf, vt) = (vm[t.f_idx], vm[t.t_idx]);
        let th = va[t.f_idx] - va[t.t_idx];
        let (s, c) = th.sin_cos();
        let p = g * vf * vf - vf * vt * (g * c + b * s);
        let q = -(b + t.half_charge) * vf * vf - vf * vt * (g * s - b * c);
        (p, q, s, c)
    }

    fn eval(
        &self,
        x: &DVector<f64>,
        g: &mut DVector<f64>,
        h: &mut DVector<f64>,
        jg: &mut DMatrix<f64>,
        jh: &mut DMatrix<f64>,
    ) {
        g.fill(0.0);
        h.fill(0.0);
        jg.fill(0.0);
        jh.fill(0.0);
        let (vm, va) = self.bus_state(x);
        let nb = self.n_bus;

        // calculated injections
        let v: Vec<Complex64> = (0..nb).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let mut pc = vec![0.0; nb];
        let mut qc = vec![0.0; nb];
        for (i, k, y) in self.ybus.iter() {
            let s = v[i] * (y * v[k]).conj();
            pc[i] += s.re;
            qc[i] += s.im;
        }

        // balance rows: injections minus calculated
        for i in 0..nb {
            g[i] -= pc[i];
            g[nb + i] -= qc[i];
        }
        for gv in &self.gens {
            g[gv.bus_idx] += x[gv.p_var];
            g[nb + gv.bus_idx] += x[gv.q_var];
            jg[(gv.bus_idx, gv.p_var)] += 1.0;
            jg[(nb + gv.bus_idx, gv.q_var)] += 1.0;
        }
        for l in &self.loads {
            let p = l.p_var.map_or(l.p_fixed, |vv| x[vv]);
            g[l.bus_idx] -= p;
            g[nb + l.bus_idx] -= p * l.ratio;
            if let Some(vv) = l.p_var {
                jg[(l.bus_idx, vv)] -= 1.0;
                jg[(nb + l.bus_idx, vv)] -= l.ratio;
            }
        }

        // partials of the calculated injections (entered negated)
        for (i, k, y) in self.ybus.iter() {
            let (gg, bb) = (y.re, y.im);
            if i == k {
                let dp_dth = -qc[i] - bb * vm[i] * vm[i];
                let dp_dvm = pc[i] / vm[i] + gg * vm[i];
                let dq_dth = pc[i] - gg * vm[i] * vm[i];
                let dq_dvm = qc[i] / vm[i] - bb * vm[i];
                if let Some(c) = self.th_of_bus[i] {
                    jg[(i, c)] -= dp_dth;
                    jg[(nb + i, c)] -= dq_dth;
                }
                if let Some(c) = self.vm_of_bus[i] {
                    jg[(i, c)] -= dp_dvm;
                    jg[(nb + i, c)] -= dq_dvm;
                }
            } else {
                // theta_i and vm_i diagonals are complete via the totals
                // in the i == k branch
                let th = va[i] - va[k];
                let (s, c) = th.sin_cos();
                let dp_dth_k = vm[i] * vm[k] * (gg * s - bb * c);
                let dp_dvm_k = vm[i] * (gg * c + bb * s);
                let dq_dth_k = -vm[i] * vm[k] * (gg * c + bb * s);
                let dq_dvm_k = vm[i] * (gg * s - bb * c);
                if let Some(cc) = self.th_of_bus[k] {
                    jg[(i, cc)] -= dp_dth_k;
                    jg[(nb + i, cc)] -= dq_dth_k;
                }
                if let Some(cc) = self.vm_of_bus[k] {
                    jg[(i, cc)] -= dp_dvm_k;
                    jg[(nb + i, cc)] -= dq_dvm_k;
                }
            }
        }

        // device injections and their partials
        let mut dev_inj = Vec::with_capacity(self.devs.len());
        for d in &self.devs {
            let (inj, par) = self.device_injections(d, x, &vm, &va);
            g[d.i_idx] += inj.p_i;
            g[nb + d.i_idx] += inj.q_i1 + inj.q_i2;
            g[d.j_idx] += inj.p_j;
            g[nb + d.j_idx] += inj.q_j;
            let cols = [
                (self.th_of_bus[d.i_idx], par.d_th_i),
                (self.th_of_bus[d.j_idx], par.d_th_j),
                (self.vm_of_bus[d.i_idx], par.d_vm_i),
                (self.vm_of_bus[d.j_idx], par.d_vm_j),
                (d.vt_var, par.d_v_t),
                (d.ph_var, par.d_phi_t),
                (d.iq_var, par.d_i_q),
            ];
            for (col, pj) in cols {
                if let Some(c) = col {
                    jg[(d.i_idx, c)] += pj.p_i;
                    jg[(nb + d.i_idx, c)] += pj.q_i1 + pj.q_i2;
                    jg[(d.j_idx, c)] += pj.p_j;
                    jg[(nb + d.j_idx, c)] += pj.q_j;
                }
            }
            dev_inj.push((inj, par));
        }

        // thermal rows
        let mut row = 0;
        for t in &self.thermal {
            let (gg, bb) = (t.ys.re, t.ys.im);
            let (vf, vt) = (vm[t.f_idx], vm[t.t_idx]);
            let (p, q, s, c) = self.flow_at(t, &vm, &va);
            h[row] = p * p + q * q - t.rating * t.rating;
            let dp_dvf = 2.0 * gg * vf - vt * (gg * c + bb * s);
            let dp_dvt = -vf * (gg * c + bb * s);
            let dp_dthf = vf * vt * (gg * s - bb * c);
            let dq_dvf = -2.0 * (bb + t.half_charge) * vf - vt * (gg * s - bb * c);
            let dq_dvt = -vf * (gg * s - bb * c);
            let dq_dthf = -vf * vt * (gg * c + bb * s);
            let writes = [
                (self.vm_of_bus[t.f_idx], dp_dvf, dq_dvf),
                (self.vm_of_bus[t.t_idx], dp_dvt, dq_dvt),
                (self.th_of_bus[t.f_idx], dp_dthf, dq_dthf),
                (self.th_of_bus[t.t_idx], -dp_dthf, -dq_dthf),
            ];
            for (col, dp, dq) in writes {
                if let Some(cc) = col {
                    jh[(row, cc)] += 2.0 * p * dp + 2.0 * q * dq;
                }
            }
            row += 1;
        }

        // stability rows: |W|^2 - (Lcrit * V_j)^2 <= 0
        for l in &self.lrows {
            let w = self.w_of(l, &vm, &va);
            let vj = vm[l.bus_idx];
            h[row] = w.norm_sqr() - l.l_crit * l.l_crit * vj * vj;
            if let Some(cc) = self.vm_of_bus[l.bus_idx] {
                // dW/dVj = e^{j th_j}
                let e = Complex64::from_polar(1.0, va[l.bus_idx]);
                jh[(row, cc)] += 2.0 * (w.conj() * e).re - 2.0 * l.l_crit * l.l_crit * vj;
            }
            if let Some(cc) = self.th_of_bus[l.bus_idx] {
                let vj_ph = Complex64::from_polar(vj, va[l.bus_idx]);
                jh[(row, cc)] += 2.0 * (w.conj() * (Complex64::i() * vj_ph)).re;
            }
            for (f, &gi) in l.f_row.iter().zip(&l.gen_idx) {
                let vg = Complex64::from_polar(vm[gi], va[gi]);
                if let Some(cc) = self.th_of_bus[gi] {
                    jh[(row, cc)] += 2.0 * (w.conj() * (-f * Complex64::i() * vg)).re;
                }
                if let Some(cc) = self.vm_of_bus[gi] {
                    let e = Complex64::from_polar(1.0, va[gi]);
                    jh[(row, cc)] += 2.0 * (w.conj() * (-f * e)).re;
                }
            }
            row += 1;
        }

        // device injection limit rows
        for ir in &self.inj_rows {
            let d = &self.devs[ir.dev];
            let (inj, par) = &dev_inj[ir.dev];
            let pick = |i: &Injections| match ir.kind {
                InjKind::PActive => i.p_i,
                InjKind::QSeries => i.q_i1,
                InjKind::QShunt => i.q_i2,
            };
            let sign = if ir.upper { 1.0 } else { -1.0 };
            h[row] = sign * (pick(inj) - ir.bound);
            let cols = [
                (self.th_of_bus[d.i_idx], pick(&par.d_th_i)),
                (self.th_of_bus[d.j_idx], pick(&par.d_th_j)),
                (self.vm_of_bus[d.i_idx], pick(&par.d_vm_i)),
                (self.vm_of_bus[d.j_idx], pick(&par.d_vm_j)),
                (d.vt_var, pick(&par.d_v_t)),
                (d.ph_var, pick(&par.d_phi_t)),
                (d.iq_var, pick(&par.d_i_q)),
            ];
            for (col, dv) in cols {
                if let Some(cc) = col {
                    jh[(row, cc)] += sign * dv;
                }
            }
            row += 1;
        }
    }
}

impl<'a> NlpModel for CurtailProblem<'a> {
    fn num_vars(&self) -> usize {
        self.n_vars
    }

    fn num_eq(&self) -> usize {
        self.num_eq_rows()
    }

    fn num_ineq(&self) -> usize {
        self.num_ineq_rows()
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_vec(self.x_min.clone()),
            DVector::from_vec(self.x_max.clone()),
        )
    }

    fn objective(&self, x: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        grad.fill(0.0);
        match self.objective {
            Objective::MinCurtailment => {
                let mut f = 0.0;
                for l in &self.loads {
                    match l.p_var {
                        Some(v) => {
                            f += l.p_req - x[v];
                            grad[v] = -1.0;
                        }
                        None => f += l.p_req - l.p_fixed,
                    }
                }
                f
            }
            Objective::ProfilePolish { target, effort_weight } => {
                let mut f = 0.0;
                for i in 0..self.n_bus {
                    if let Some(v) = self.vm_of_bus[i] {
                        let d = x[v] - target;
                        f += d * d;
                        grad[v] = 2.0 * d;
                    }
                }
                for d in &self.devs {
                    if let Some(var) = d.iq_var {
                        f += effort_weight * x[var] * x[var];
                        grad[var] += 2.0 * effort_weight * x[var];
                    }
                }
                f
            }
        }
    }

    fn constraints(
        &self,
        x: &DVector<f64>,
        g: &mut DVector<f64>,
        h: &mut DVector<f64>,
        jac_g: &mut DMatrix<f64>,
        jac_h: &mut DMatrix<f64>,
    ) {
        self.eval(x, g, h, jac_g, jac_h);
    }
}
