//! Acceptance suite: every published-study reproduction gate runs here at
//! its stated tolerance and prints one pass/fail line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use std::time::Instant;

use gridcurb::admittance::{build_ybus, partition};
use gridcurb::caseio;
use gridcurb::curtailopf::{self, CurtailmentResult, OpfOptions};
use gridcurb::facts::{
    compute_injections, oracle_injections, Bounds, DeviceControls, DeviceKind, FactsDevice,
};
use gridcurb::lindex::{compute_l_index, LcritMap, StabilityReport};
use gridcurb::netmodel::Network;
use gridcurb::powerflow::{solve_power_flow, PowerFlowOptions, PowerFlowSolution};
use gridcurb::study;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WSCC9: &str = include_str!("../data/wscc9.case");
const WSCC9_OPF: &str = include_str!("../data/wscc9_opf.case");
const TABLE5: &str = include_str!("../data/table5.study");
const TABLE6: &str = include_str!("../data/table6.study");

fn base_network() -> Network {
    caseio::parse_case(WSCC9).expect("wscc9.case parses").0
}

fn opf_network() -> Network {
    caseio::parse_case(WSCC9_OPF).expect("wscc9_opf.case parses").0
}

fn snapshot(net: &Network) -> (PowerFlowSolution, StabilityReport) {
    let sol = solve_power_flow(net, &PowerFlowOptions::default()).expect("power flow converges");
    let party = partition(&build_ybus(net), net).expect("partition");
    let rep = compute_l_index(&party, &sol).expect("l-index");
    (sol, rep)
}

fn stability_of(net: &Network, result: &CurtailmentResult) -> StabilityReport {
    let party = partition(&build_ybus(net), net).expect("partition");
    let sol = PowerFlowSolution {
        bus_ids: result.bus_ids.clone(),
        vm: result.vm.clone(),
        va: result.va.clone(),
        flows: Vec::new(),
        slack_p: 0.0,
        slack_q: 0.0,
        iterations: 0,
        final_mismatch: 0.0,
    };
    compute_l_index(&party, &sol).expect("l-index from opf phasors")
}

fn rated_device(kind: DeviceKind, i: usize, j: usize, rating: f64) -> FactsDevice {
    let mut d = FactsDevice::new(kind, i, j);
    d.limits.p_inj = Bounds::symmetric(rating);
    d.limits.q_inj1 = Bounds::symmetric(rating);
    d.limits.q_inj2 = Bounds::symmetric(rating);
    d
}

fn study_spec(case: &str, study_text: &str) -> study::StudySpec {
    let combined = format!("{case}\n{study_text}");
    caseio::parse_case(&combined)
        .expect("study parses")
        .1
        .expect("study section present")
}

/// Evaluate named sub-checks, print one criterion line, panic if any fail.
fn finish(criterion: &str, checks: Vec<(String, bool)>) {
    let failures: Vec<&String> =
        checks.iter().filter(|(_, ok)| !ok).map(|(m, _)| m).collect();
    if failures.is_empty() {
        println!("criterion {criterion}: PASS ({} checks)", checks.len());
    } else {
        println!(
            "criterion {criterion}: FAIL ({} of {} checks): {}",
            failures.len(),
            checks.len(),
            failures
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(" | ")
        );
        panic!(
            "criterion {criterion} failed: {}",
            failures
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(" | ")
        );
    }
}

#[test]
fn criterion_1_base_case_snapshot() {
    let net = base_network();
    let t0 = Instant::now();
    let (sol, rep) = snapshot(&net);
    let elapsed = t0.elapsed();
    let v9 = sol.vm[sol.bus_index(9).unwrap()];
    let mut checks = Vec::new();
    for (bus, want) in [(5, 0.1471), (7, 0.1169), (9, 0.1957)] {
        let got = rep.l_at(bus).unwrap();
        checks.push((
            format!("L_{bus} = {got:.4} within 0.02 of {want}"),
            (got - want).abs() <= 0.02,
        ));
    }
    checks.push((format!("V_9 = {v9:.4} within 0.01 of 0.9468"), (v9 - 0.9468).abs() <= 0.01));
    checks.push((format!("runtime {elapsed:.2?} < 1 s"), elapsed.as_secs_f64() < 1.0));
    finish("1 (base-case indices and voltage)", checks);
}

#[test]
fn criterion_2_contingency_collapse() {
    let base = base_network();
    let (_, base_rep) = snapshot(&base);
    let net = base.apply_outage(4, 9).unwrap();
    let t0 = Instant::now();
    let (sol, rep) = snapshot(&net);
    let elapsed = t0.elapsed();
    let v9 = sol.vm[sol.bus_index(9).unwrap()];
    let l9 = rep.l_at(9).unwrap();
    let (_, q89, _) = sol.directed_flow(8, 9).unwrap();
    let mut checks = vec![
        (format!("V_9 = {v9:.4} in [0.55, 0.68]"), (0.55..=0.68).contains(&v9)),
        (format!("L_9 = {l9:.4} >= 0.9"), l9 >= 0.9),
        (format!("Q_8-9 = {q89:.4} > 1.0"), q89 > 1.0),
        (format!("L_9 is the maximum index"), (rep.max_l() - l9).abs() < 1e-12),
        (
            format!("L_9 exceeds every base index by >= 0.7 (base max {:.4})", base_rep.max_l()),
            l9 - base_rep.max_l() >= 0.7,
        ),
        (format!("runtime {elapsed:.2?} < 1 s"), elapsed.as_secs_f64() < 1.0),
    ];
    checks.rotate_left(0);
    finish("2 (near-collapse contingency)", checks);
}

#[test]
fn criterion_3_no_facts_curtailment() {
    let net = opf_network();
    let lcrit = LcritMap::parse("5=0.1,7=0.3,9=0.3").unwrap();
    let t0 = Instant::now();
    let r = curtailopf::solve_curtailment(&net, &lcrit, &OpfOptions::default()).unwrap();
    let elapsed = t0.elapsed();
    let checks = vec![
        (
            format!("total curtailment {:.4} within 0.03 of 0.3592", r.objective),
            (r.objective - 0.3592).abs() <= 0.03,
        ),
        (
            format!(
                "concentrated at bus 5 ({:.4} of {:.4})",
                r.curtailment_at(5),
                r.objective
            ),
            r.curtailment_at(5) >= 0.9 * r.objective,
        ),
        (format!("runtime {elapsed:.2?} < 10 s"), elapsed.as_secs_f64() < 10.0),
    ];
    finish("3 (no-device curtailment)", checks);
}

#[test]
fn criterion_4_upfc_relief_ordering() {
    let base = opf_network();
    let lcrit = LcritMap::parse("5=0.1,7=0.3,9=0.3").unwrap();
    let solve_with = |devs: &[(usize, usize)]| -> f64 {
        let mut net = base.clone();
        for &(i, j) in devs {
            net.facts_devices.push(rated_device(DeviceKind::Upfc, i, j, 0.25));
        }
        curtailopf::solve_curtailment(&net, &lcrit, &OpfOptions::default())
            .unwrap()
            .objective
    };
    let c_none = solve_with(&[]);
    let c_56 = solve_with(&[(5, 6)]);
    let c_pair = solve_with(&[(5, 6), (4, 5)]);
    let checks = vec![
        (
            format!("ordering {c_pair:.4} < {c_56:.4} < {c_none:.4}"),
            c_pair < c_56 && c_56 < c_none,
        ),
        (format!("c(5-6 & 4-5) = {c_pair:.4} <= 0.06"), c_pair <= 0.06),
        (format!("c(5-6) = {c_56:.4} <= 0.14"), c_56 <= 0.14),
    ];
    finish("4 (UPFC relief ordering)", checks);
}

/// Known red: the reference value 0.2842 for the tightest margin is not
/// attainable by a converged solver. With the bus-9 supply pinned at
/// 1.25 - 0.2842 pu, meeting L_9 <= 0.3 after the outage forces about
/// 0.76 pu of additional shedding at bus 7 (total 1.04), so the printed
/// point is infeasible; the true optimum of this problem is 0.3796, all
/// at bus 9, and the accompanying voltages match the reference to four
/// decimals on every row.
#[test]
fn criterion_5_lcrit_sweep_without_upfc() {
    let net = base_network();
    let spec = study_spec(WSCC9, TABLE5);
    let result = study::run_study(&net, &spec, 0, Some(2));
    let mut curts = Vec::new();
    let mut v9s = Vec::new();
    for name in ["lcrit_03", "lcrit_04", "lcrit_05"] {
        match &result.cell(name).unwrap().outcome {
            study::CellOutcome::Curtailment { result, .. } => {
                curts.push(result.objective);
                v9s.push(result.vm_at(9).unwrap());
            }
            other => panic!("{name}: unexpected outcome {other:?}"),
        }
    }
    let mut checks = vec![(
        format!("strict decrease {:.4} > {:.4} > {:.4}", curts[0], curts[1], curts[2]),
        curts[0] > curts[1] && curts[1] > curts[2],
    )];
    for (k, want) in [0.2842, 0.1547, 0.0211].iter().enumerate() {
        checks.push((
            format!("curtailment[{k}] = {:.4} within 0.05 of {want}", curts[k]),
            (curts[k] - want).abs() <= 0.05,
        ));
    }
    for (k, want) in [0.9017, 0.8514, 0.8041].iter().enumerate() {
        checks.push((
            format!("V_9[{k}] = {:.4} within 0.02 of {want}", v9s[k]),
            (v9s[k] - want).abs() <= 0.02,
        ));
    }
    finish("5 (margin sweep without device)", checks);
}

/// Known red on the index sub-check: with zero curtailment the objective
/// no longer discriminates, and every deterministic refinement tried
/// (voltage-profile polish, converter-duty penalties, device ratings
/// 0.5-1.0, generator reactive ceilings down to 0.5 pu) selects an
/// operating point with the stability constraint strictly slack
/// (L_9 about 0.20-0.28), because well-supported interior states always
/// exist inside the device rating. A solution with L_9 exactly at the
/// 0.3 ceiling is one arbitrary member of the optimal face, not its
/// optimum under any of those criteria.
#[test]
fn criterion_6_upfc_eliminates_contingency_curtailment() {
    let net = base_network();
    let spec = study_spec(WSCC9, TABLE6);
    let result = study::run_study(&net, &spec, 0, Some(2));
    let mut checks = Vec::new();
    let mut first_row: Option<(f64, f64)> = None;
    for name in ["lcrit_03", "lcrit_04", "lcrit_05"] {
        match &result.cell(name).unwrap().outcome {
            study::CellOutcome::Curtailment { result, stability } => {
                checks.push((
                    format!("{name}: curtailment {:.2e} <= 1e-6", result.objective),
                    result.objective <= 1e-6,
                ));
                if name == "lcrit_03" {
                    first_row =
                        Some((stability.l_at(9).unwrap(), result.vm_at(9).unwrap()));
                }
            }
            other => panic!("{name}: unexpected outcome {other:?}"),
        }
    }
    let (l9, v9) = first_row.unwrap();
    checks.push((
        format!("L constraint binding at 0.3: L_9 = {l9:.4} within 0.005 of 0.3000"),
        (l9 - 0.3).abs() <= 0.005,
    ));
    checks.push((format!("V_9 = {v9:.4} >= 0.97"), v9 >= 0.97));
    finish("6 (UPFC removes contingency curtailment)", checks);
}

#[test]
fn criterion_7_pim_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let kinds = [DeviceKind::Upfc, DeviceKind::Sssc, DeviceKind::Statcom];
    let mut worst = 0.0f64;
    let n = 1500;
    for k in 0..n {
        let kind = kinds[k % 3];
        let mut d = FactsDevice::new(kind, 1, 2);
        d.controls = DeviceControls {
            v_t: if kind == DeviceKind::Statcom { 0.0 } else { rng.gen_range(0.0..0.2) },
            phi_t: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            i_q: if kind == DeviceKind::Sssc { 0.0 } else { rng.gen_range(-1.0..1.0) },
        };
        let ys = Complex64::new(1.0, 0.0)
            / Complex64::new(rng.gen_range(0.0..0.05), rng.gen_range(0.05..0.25));
        let vi = Complex64::from_polar(rng.gen_range(0.8..1.1), rng.gen_range(-0.6..0.6));
        let vj = Complex64::from_polar(rng.gen_range(0.8..1.1), rng.gen_range(-0.6..0.6));
        let a = compute_injections(&d, ys, vi, vj);
        let b = oracle_injections(&d, ys, vi, vj);
        worst = worst.max(a.max_abs_diff(&b));
    }
    finish(
        "7 (PIM equals first-principles oracle)",
        vec![(
            format!("max |pim - oracle| = {worst:.2e} < 1e-8 over {n} random states"),
            worst < 1e-8,
        )],
    );
}

#[test]
fn criterion_8_property_suite() {
    let mut checks = Vec::new();

    // zero-control device neutrality: power flow
    let base = base_network();
    let base_sol = solve_power_flow(&base, &PowerFlowOptions::default()).unwrap();
    let mut with_dev = base.clone();
    with_dev.facts_devices.push(FactsDevice::new(DeviceKind::Upfc, 8, 9));
    let dev_sol = solve_power_flow(&with_dev, &PowerFlowOptions::default()).unwrap();
    let pf_diff = base_sol
        .vm
        .iter()
        .zip(&dev_sol.vm)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    checks.push((format!("pf zero-control neutrality {pf_diff:.2e} < 1e-6"), pf_diff < 1e-6));

    // zero-control device neutrality: curtailment optimum
    let lcrit = LcritMap::parse("5=0.1,7=0.3,9=0.3").unwrap();
    let opf_base =
        curtailopf::solve_curtailment(&opf_network(), &lcrit, &OpfOptions::default()).unwrap();
    let mut neutral = opf_network();
    let mut pinned = FactsDevice::new(DeviceKind::Upfc, 8, 9);
    pinned.limits.v_t_max = 0.0;
    pinned.limits.i_q = Bounds { min: 0.0, max: 0.0 };
    neutral.facts_devices.push(pinned);
    let opf_dev = curtailopf::solve_curtailment(&neutral, &lcrit, &OpfOptions::default()).unwrap();
    checks.push((
        format!(
            "opf zero-control neutrality |{:.6} - {:.6}| < 1e-6",
            opf_dev.objective, opf_base.objective
        ),
        (opf_dev.objective - opf_base.objective).abs() < 1e-6,
    ));

    // KCL residual at every converged power flow
    for (label, net) in [
        ("base", base.clone()),
        ("outage", base.apply_outage(4, 9).unwrap()),
        ("devices", {
            let mut n = base.clone();
            let mut d = FactsDevice::new(DeviceKind::Upfc, 5, 6);
            d.controls = DeviceControls { v_t: 0.08, phi_t: 0.9, i_q: -0.3 };
            n.facts_devices.push(d);
            n
        }),
    ] {
        let sol = solve_power_flow(&net, &PowerFlowOptions::default()).unwrap();
        let resid = max_kcl_residual(&net, &sol.vm, &sol.va);
        checks.push((format!("kcl residual ({label}) {resid:.2e} < 1e-6"), resid < 1e-6));
    }

    // constant power factor at the returned optimum
    let mut pf_ratio_err = 0.0f64;
    for l in &opf_base.loads {
        if l.q_required > 0.0 {
            pf_ratio_err = pf_ratio_err
                .max((l.p_supplied / l.p_required - l.q_supplied / l.q_required).abs());
        }
    }
    checks.push((format!("power-factor ratio error {pf_ratio_err:.2e} < 1e-8"), pf_ratio_err < 1e-8));

    // margin safety: independent recomputation of L from the OPF phasors
    let rep = stability_of(&opf_network(), &opf_base);
    let mut margin_ok = true;
    let mut worst_excess = f64::NEG_INFINITY;
    for (&bus, &l) in rep.load_bus_ids.iter().zip(&rep.l) {
        let excess = l - lcrit.threshold(bus);
        worst_excess = worst_excess.max(excess);
        if excess > 1e-6 {
            margin_ok = false;
        }
    }
    checks.push((format!("margin safety: worst L excess {worst_excess:.2e} <= 1e-6"), margin_ok));

    // gradient fidelity at the returned point
    let grad_err = gradient_fidelity_at_solution();
    checks.push((format!("gradient fidelity {grad_err:.2e} < 1e-6 relative"), grad_err < 1e-6));

    // no-load index is zero
    let mut no_load = base.clone();
    no_load.loads.clear();
    for g in &mut no_load.generators {
        g.p_setpoint = 0.0;
    }
    let (_, rep) = snapshot(&no_load);
    let max_l = rep.max_l();
    checks.push((format!("no-load L = {max_l:.2e} <= 1e-10"), max_l <= 1e-10));

    finish("8 (property suite)", checks);
}

fn max_kcl_residual(net: &Network, vm: &[f64], va: &[f64]) -> f64 {
    use gridcurb::facts::injections_with_partials;
    let ybus = build_ybus(net);
    let v: Vec<Complex64> = vm
        .iter()
        .zip(va)
        .map(|(&m, &a)| Complex64::from_polar(m, a))
        .collect();
    let n = v.len();
    let mut resid = 0.0f64;
    for (r, &bus) in ybus.bus_ids.iter().enumerate() {
        if net.bus(bus).unwrap().kind != gridcurb::netmodel::BusKind::Pq {
            continue;
        }
        let mut calc = Complex64::new(0.0, 0.0);
        for c in 0..n {
            calc += v[r] * (ybus.get(r, c) * v[c]).conj();
        }
        let mut sched = Complex64::new(0.0, 0.0);
        for l in &net.loads {
            if l.bus == bus {
                sched -= Complex64::new(l.p_req, l.q_req);
            }
        }
        for d in &net.facts_devices {
            let k = net.find_branch(d.i_bus, d.j_bus).unwrap();
            let ys = d.effective_admittance(net.branches[k].series_admittance());
            let i = ybus.index_of(d.i_bus).unwrap();
            let j = ybus.index_of(d.j_bus).unwrap();
            let (inj, _) = injections_with_partials(d, ys, vm[i], va[i], vm[j], va[j]);
            if d.i_bus == bus {
                sched += Complex64::new(inj.p_i, inj.q_i1 + inj.q_i2);
            }
            if d.j_bus == bus {
                sched += Complex64::new(inj.p_j, inj.q_j);
            }
        }
        resid = resid.max((sched - calc).norm());
    }
    resid
}

fn gradient_fidelity_at_solution() -> f64 {
    use gridcurb::curtailopf::{CurtailProblem, NlpModel, Objective};
    use nalgebra::{DMatrix, DVector};

    let mut net = opf_network().apply_outage(4, 9).unwrap();
    net.facts_devices.push(rated_device(DeviceKind::Upfc, 8, 9, 0.8));
    let lcrit = LcritMap::parse("5=0.3,7=0.3,9=0.3").unwrap();
    let r = curtailopf::solve_curtailment(&net, &lcrit, &OpfOptions::default()).unwrap();

    // rebuild the stage-1 problem and encode the returned point
    let prob = CurtailProblem::new(&net, &lcrit, Objective::MinCurtailment, None).unwrap();
    let n = prob.num_vars();
    let mut x = DVector::zeros(n);
    for i in 0..n {
        let name = prob.var_name(i).to_string();
        let mut parts = name.split_whitespace();
        let kind = parts.next().unwrap();
        let value = match kind {
            "theta" | "V" => {
                let bus: usize = parts.nth(1).unwrap().parse().unwrap();
                let k = r.bus_ids.iter().position(|&b| b == bus).unwrap();
                if kind == "theta" {
                    r.va[k]
                } else {
                    r.vm[k]
                }
            }
            "Pg" | "Qg" => {
                let bus: usize = parts.nth(1).unwrap().parse().unwrap();
                let g = r.generators.iter().find(|g| g.bus == bus).unwrap();
                if kind == "Pg" {
                    g.p
                } else {
                    g.q
                }
            }
            "Pl" => {
                let bus: usize = parts.nth(1).unwrap().parse().unwrap();
                r.loads.iter().find(|l| l.bus == bus).unwrap().p_supplied
            }
            "vt" => r.devices[0].controls.v_t,
            "phi" => r.devices[0].controls.phi_t,
            "iq" => r.devices[0].controls.i_q,
            other => panic!("unexpected variable {other}"),
        };
        x[i] = value;
    }

    let neq = prob.num_eq();
    let niq = prob.num_ineq();
    let mut g = DVector::zeros(neq);
    let mut h = DVector::zeros(niq);
    let mut jg = DMatrix::zeros(neq, n);
    let mut jh = DMatrix::zeros(niq, n);
    prob.constraints(&x, &mut g, &mut h, &mut jg, &mut jh);
    let mut grad = DVector::zeros(n);
    prob.objective(&x, &mut grad);

    let step = 1e-6;
    let mut worst = 0.0f64;
    let mut sg = DMatrix::zeros(neq, n);
    let mut sh = DMatrix::zeros(niq, n);
    for c in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += step;
        xm[c] -= step;
        let mut gp = DVector::zeros(neq);
        let mut hp = DVector::zeros(niq);
        let mut gm = DVector::zeros(neq);
        let mut hm = DVector::zeros(niq);
        prob.constraints(&xp, &mut gp, &mut hp, &mut sg, &mut sh);
        prob.constraints(&xm, &mut gm, &mut hm, &mut sg, &mut sh);
        for r_ in 0..neq {
            let fd = (gp[r_] - gm[r_]) / (2.0 * step);
            worst = worst.max((fd - jg[(r_, c)]).abs() / (1.0 + jg[(r_, c)].abs()));
        }
        for r_ in 0..niq {
            let fd = (hp[r_] - hm[r_]) / (2.0 * step);
            worst = worst.max((fd - jh[(r_, c)]).abs() / (1.0 + jh[(r_, c)].abs()));
        }
        let mut scratch = DVector::zeros(n);
        let fp = prob.objective(&xp, &mut scratch);
        let fm = prob.objective(&xm, &mut scratch);
        let fd = (fp - fm) / (2.0 * step);
        worst = worst.max((fd - grad[c]).abs() / (1.0 + grad[c].abs()));
    }
    worst
}

#[test]
fn criterion_9_study_determinism() {
    let net = base_network();
    let spec = study_spec(WSCC9, TABLE5);
    let opts = caseio::ReportOptions {
        format: caseio::Format::Csv,
        ..Default::default()
    };
    let run = || {
        let result = study::run_study(&net, &spec, 42, Some(4));
        caseio::emit_report(caseio::Report::Sweep(&result), &opts)
    };
    let a = run();
    let b = run();
    finish(
        "9 (study determinism)",
        vec![(
            format!("repeated seeded runs byte-identical ({} bytes)", a.len()),
            a == b && !a.is_empty(),
        )],
    );
}
