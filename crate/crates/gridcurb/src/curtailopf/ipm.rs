//! Primal-dual interior-point solver for smooth NLPs with a damped-BFGS
//! Lagrangian Hessian approximation.
//!
//! Solves `min f(x)` subject to `g(x) = 0`, `h(x) <= 0` and simple bounds
//! `xl <= x <= xu`. Bounds become inequality slack rows internally (equal
//! lower/upper bounds become equality rows), every inequality gets a
//! positive slack `z` with multiplier `mu`, and the Newton step solves the
//! condensed KKT system with a fraction-to-boundary rule keeping `z` and
//! `mu` strictly positive.

use nalgebra::{DMatrix, DVector};

pub trait NlpModel {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;
    /// Lower/upper variable bounds; infinities mark free directions.
    fn bounds(&self) -> (DVector<f64>, DVector<f64>);
    /// Objective value; `grad` is overwritten.
    fn objective(&self, x: &DVector<f64>, grad: &mut DVector<f64>) -> f64;
    /// Equality and inequality values plus their Jacobians (rows are
    /// constraints, columns variables). All outputs are overwritten.
    fn constraints(
        &self,
        x: &DVector<f64>,
        g: &mut DVector<f64>,
        h: &mut DVector<f64>,
        jac_g: &mut DMatrix<f64>,
        jac_h: &mut DMatrix<f64>,
    );
}

#[derive(Debug, Clone)]
pub struct IpmOptions {
    pub feas_tol: f64,
    pub grad_tol: f64,
    pub comp_tol: f64,
    pub cost_tol: f64,
    pub max_iter: usize,
    /// Fraction-to-boundary coefficient.
    pub xi: f64,
    /// Barrier centering coefficient.
    pub sigma: f64,
    /// Initial slack / multiplier level.
    pub z0: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions {
            feas_tol: 1e-6,
            grad_tol: 1e-6,
            comp_tol: 1e-6,
            cost_tol: 1e-8,
            max_iter: 400,
            xi: 0.99995,
            sigma: 0.1,
            z0: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IpmResult {
    pub x: DVector<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub feascond: f64,
    pub gradcond: f64,
    pub compcond: f64,
    /// Multipliers for the model's equality rows.
    pub lam_eq: DVector<f64>,
    /// Multipliers for the model's inequality rows.
    pub mu_ineq: DVector<f64>,
}

struct BoundRows {
    /// (variable index, bound value); row form `x_i - u_i <= 0`.
    upper: Vec<(usize, f64)>,
    /// (variable index, bound value); row form `l_i - x_i <= 0`.
    lower: Vec<(usize, f64)>,
    /// (variable index, pinned value); handled as equality rows.
    pinned: Vec<(usize, f64)>,
}

fn classify_bounds(xl: &DVector<f64>, xu: &DVector<f64>) -> BoundRows {
    let mut rows = BoundRows { upper: Vec::new(), lower: Vec::new(), pinned: Vec::new() };
    for i in 0..xl.len() {
        let (l, u) = (xl[i], xu[i]);
        if l.is_finite() && u.is_finite() && (u - l).abs() < 1e-14 {
            rows.pinned.push((i, l));
            continue;
        }
        if u.is_finite() {
            rows.upper.push((i, u));
        }
        if l.is_finite() {
            rows.lower.push((i, l));
        }
    }
    rows
}

pub fn solve(model: &dyn NlpModel, x0: &DVector<f64>, opts: &IpmOptions) -> IpmResult {
    let n = model.num_vars();
    let neq_m = model.num_eq();
    let niq_m = model.num_ineq();
    let (xl, xu) = model.bounds();
    let bounds = classify_bounds(&xl, &xu);

    let neq = neq_m + bounds.pinned.len();
    let niq = niq_m + bounds.upper.len() + bounds.lower.len();

    let mut x = x0.clone();
    // pinned variables start exactly at their value
    for &(i, v) in &bounds.pinned {
        x[i] = v;
    }

    let mut g_m = DVector::zeros(neq_m);
    let mut h_m = DVector::zeros(niq_m);
    let mut jg_m = DMatrix::zeros(neq_m, n);
    let mut jh_m = DMatrix::zeros(niq_m, n);
    let mut df = DVector::zeros(n);

    // stacked views including bound rows
    let mut g = DVector::zeros(neq);
    let mut h = DVector::zeros(niq);
    let mut jg = DMatrix::zeros(neq, n);
    let mut jh = DMatrix::zeros(niq, n);

    let eval = |x: &DVector<f64>,
                    g_m: &mut DVector<f64>,
                    h_m: &mut DVector<f64>,
                    jg_m: &mut DMatrix<f64>,
                    jh_m: &mut DMatrix<f64>,
                    df: &mut DVector<f64>,
                    g: &mut DVector<f64>,
                    h: &mut DVector<f64>,
                    jg: &mut DMatrix<f64>,
                    jh: &mut DMatrix<f64>|
     -> f64 {
        let f = model.objective(x, df);
        model.constraints(x, g_m, h_m, jg_m, jh_m);
        jg.fill(0.0);
        jh.fill(0.0);
        for r in 0..neq_m {
            g[r] = g_m[r];
            for c in 0..n {
                jg[(r, c)] = jg_m[(r, c)];
            }
        }
        for (k, &(i, v)) in bounds.pinned.iter().enumerate() {
            g[neq_m + k] = x[i] - v;
            jg[(neq_m + k, i)] = 1.0;
        }
        for r in 0..niq_m {
            h[r] = h_m[r];
            for c in 0..n {
                jh[(r, c)] = jh_m[(r, c)];
            }
        }
        let mut row = niq_m;
        for &(i, u) in &bounds.upper {
            h[row] = x[i] - u;
            jh[(row, i)] = 1.0;
            row += 1;
        }
        for &(i, l) in &bounds.lower {
            h[row] = l - x[i];
            jh[(row, i)] = -1.0;
            row += 1;
        }
        f
    };

    let mut f = eval(&x, &mut g_m, &mut h_m, &mut jg_m, &mut jh_m, &mut df,
                     &mut g, &mut h, &mut jg, &mut jh);

    // slack and multiplier initialisation
    let mut gamma = 1.0f64;
    let mut lam = DVector::zeros(neq);
    let mut z = DVector::from_element(niq, opts.z0);
    for i in 0..niq {
        if h[i] < -opts.z0 {
            z[i] = -h[i];
        }
    }
    let mut mu = DVector::from_element(niq, opts.z0);
    for i in 0..niq {
        if gamma / z[i] > opts.z0 {
            mu[i] = gamma / z[i];
        }
    }

    let mut bfgs = DMatrix::<f64>::identity(n, n);
    let mut f0 = f;

    let lx = |df: &DVector<f64>, jg: &DMatrix<f64>, jh: &DMatrix<f64>,
              lam: &DVector<f64>, mu: &DVector<f64>| -> DVector<f64> {
        df + jg.transpose() * lam + jh.transpose() * mu
    };
    let mut l_x = lx(&df, &jg, &jh, &lam, &mu);

    let conds = |g: &DVector<f64>, h: &DVector<f64>, l_x: &DVector<f64>,
                 x: &DVector<f64>, z: &DVector<f64>, lam: &DVector<f64>,
                 mu: &DVector<f64>| -> (f64, f64, f64) {
        let max_h = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let g_norm = g.amax_or_zero();
        let feas = g_norm.max(max_h.max(0.0))
            / (1.0 + x.amax_or_zero().max(z.amax_or_zero()));
        let grad = l_x.amax_or_zero() / (1.0 + lam.amax_or_zero().max(mu.amax_or_zero()));
        let comp = z.dot(mu) / (1.0 + x.amax_or_zero());
        (feas, grad, comp)
    };

    let (mut feascond, mut gradcond, mut compcond) = conds(&g, &h, &l_x, &x, &z, &lam, &mu);
    let mut converged =
        feascond < opts.feas_tol && gradcond < opts.grad_tol && compcond < opts.comp_tol;
    let mut iterations = 0;
    let mut failed = false;

    while !converged && !failed && iterations < opts.max_iter {
        iterations += 1;

        let zinv_mu: Vec<f64> = (0..niq).map(|i| mu[i] / z[i]).collect();
        // M = B + Jh' * diag(mu/z) * Jh
        let mut m_mat = bfgs.clone();
        for r in 0..niq {
            let w = zinv_mu[r];
            if w == 0.0 {
                continue;
            }
            for a in 0..n {
                let ja = jh[(r, a)];
                if ja == 0.0 {
                    continue;
                }
                for b in 0..n {
                    m_mat[(a, b)] += w * ja * jh[(r, b)];
                }
            }
        }
        // N = Lx + Jh' * (mu .* h + gamma) ./ z
        let mut weights = DVector::zeros(niq);
        for i in 0..niq {
            weights[i] = (mu[i] * h[i] + gamma) / z[i];
        }
        let n_vec = &l_x + jh.transpose() * &weights;

        let dim = n + neq;
        let mut kkt = DMatrix::zeros(dim, dim);
        for a in 0..n {
            for b in 0..n {
                kkt[(a, b)] = m_mat[(a, b)];
            }
        }
        for r in 0..neq {
            for c in 0..n {
                kkt[(n + r, c)] = jg[(r, c)];
                kkt[(c, n + r)] = jg[(r, c)];
            }
            kkt[(n + r, n + r)] = -1e-11;
        }
        let mut rhs = DVector::zeros(dim);
        for a in 0..n {
            rhs[a] = -n_vec[a];
        }
        for r in 0..neq {
            rhs[n + r] = -g[r];
        }
        let dxdlam = match kkt.full_piv_lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => break,
        };
        let dx = dxdlam.rows(0, n).into_owned();
        let dlam = dxdlam.rows(n, neq).into_owned();
        let jh_dx = &jh * &dx;
        let mut dz = DVector::zeros(niq);
        let mut dmu = DVector::zeros(niq);
        for i in 0..niq {
            dz[i] = -h[i] - z[i] - jh_dx[i];
            dmu[i] = -mu[i] + (gamma - mu[i] * dz[i]) / z[i];
        }

        // fraction-to-boundary step lengths
        let mut alpha_p = 1.0f64;
        let mut alpha_d = 1.0f64;
        for i in 0..niq {
            if dz[i] < 0.0 {
                alpha_p = alpha_p.min(opts.xi * z[i] / -dz[i]);
            }
            if dmu[i] < 0.0 {
                alpha_d = alpha_d.min(opts.xi * mu[i] / -dmu[i]);
            }
        }

        let x_prev = x.clone();
        let df_prev = df.clone();
        let jg_prev = jg.clone();
        let jh_prev = jh.clone();

        x += alpha_p * &dx;
        for i in 0..niq {
            z[i] += alpha_p * dz[i];
            mu[i] += alpha_d * dmu[i];
        }
        lam += alpha_d * &dlam;
        if niq > 0 {
            // floor keeps the barrier alive while BFGS stationarity
            // catches up with an already-converged complementarity
            gamma = (opts.sigma * z.dot(&mu) / niq as f64).max(1e-18);
        }

        f = eval(&x, &mut g_m, &mut h_m, &mut jg_m, &mut jh_m, &mut df,
                 &mut g, &mut h, &mut jg, &mut jh);
        l_x = lx(&df, &jg, &jh, &lam, &mu);

        // damped BFGS update of the Lagrangian Hessian approximation
        let s = &x - &x_prev;
        let s_norm2 = s.dot(&s);
        if s_norm2 > 1e-16 {
            let lx_prev_new_mults = &df_prev + jg_prev.transpose() * &lam + jh_prev.transpose() * &mu;
            let y = &l_x - &lx_prev_new_mults;
            let bs = &bfgs * &s;
            let s_bs = s.dot(&bs);
            let s_y = s.dot(&y);
            let y_eff = if s_y < 0.2 * s_bs && s_bs > 0.0 {
                let theta = 0.8 * s_bs / (s_bs - s_y);
                theta * y + (1.0 - theta) * &bs
            } else {
                y
            };
            let s_yeff = s.dot(&y_eff);
            if s_bs > 1e-14 && s_yeff > 1e-14 {
                let outer_y = &y_eff * y_eff.transpose() / s_yeff;
                let outer_b = &bs * bs.transpose() / s_bs;
                bfgs += outer_y - outer_b;
            }
        }

        let c = conds(&g, &h, &l_x, &x, &z, &lam, &mu);
        feascond = c.0;
        gradcond = c.1;
        compcond = c.2;
        let costcond = (f - f0).abs() / (1.0 + f0.abs());

        if feascond < opts.feas_tol
            && gradcond < opts.grad_tol
            && compcond < opts.comp_tol
            && costcond < opts.cost_tol
        {
            converged = true;
        } else {
            if x.iter().any(|v| !v.is_finite())
                || alpha_p < 1e-14
                || alpha_d < 1e-14
                || gamma > 1.0 / f64::EPSILON
            {
                failed = true;
            }
            f0 = f;
        }
    }

    // discard multipliers of clearly inactive inequalities
    for i in 0..niq {
        if h[i] < -opts.feas_tol && mu[i] < 1e-5 {
            mu[i] = 0.0;
        }
    }

    IpmResult {
        objective: f,
        converged,
        iterations,
        feascond,
        gradcond,
        compcond,
        lam_eq: lam.rows(0, neq_m).into_owned(),
        mu_ineq: mu.rows(0, niq_m).into_owned(),
        x,
    }
}

trait AmaxOrZero {
    fn amax_or_zero(&self) -> f64;
}

impl AmaxOrZero for DVector<f64> {
    fn amax_or_zero(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.amax()
        }
    }
}
