//! Small dense convex quadratic programs.
//!
//! ```text
//!     minimize     1/2 z' P z + c' z
//!     subject to   G z <= h
//!                  lb <= z <= ub
//! ```
//!
//! Solved with a Mehrotra predictor-corrector interior point method. A Phase-I
//! linear program decides feasibility first, variables with `lb == ub` are
//! eliminated, and the interior solution is polished by solving the equality
//! KKT system of its active set (active bounds are then met exactly).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box used in place of infinite bounds while deciding feasibility.
const PHASE1_BOX: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    /// Symmetric PSD cost matrix, as rows.
    pub p: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    /// Inequality matrix, as rows.
    pub g: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    pub max_iterations: usize,
    /// Relative stopping tolerance of the interior point iteration.
    pub tolerance: f64,
    /// Feasibility tolerance promised for `Optimal` results.
    pub feasibility_tolerance: f64,
    /// Phase-I optimum above which the problem is declared infeasible.
    pub infeasibility_threshold: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            tolerance: 1e-11,
            feasibility_tolerance: 1e-8,
            infeasibility_threshold: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult {
    pub status: QpStatus,
    pub z: Vec<f64>,
    pub objective: f64,
    /// `max(G z - h, lb - z, z - ub, 0)`.
    pub primal_residual: f64,
    pub iterations: usize,
    /// Multipliers of `G z <= h`.
    pub lambda: Vec<f64>,
    /// Multipliers of `z >= lb` and `z <= ub`.
    pub lambda_lb: Vec<f64>,
    pub lambda_ub: Vec<f64>,
}

/// Scaled KKT residuals of a candidate primal-dual point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    /// Most negative multiplier, reported as a positive number.
    pub dual_sign: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual_sign)
    }
}

impl QpProblem {
    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.h.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.c.len();
        if n == 0 {
            return Err(Error::invalid("QP must have at least one variable"));
        }
        if self.p.len() != n || self.p.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("P must be n x n"));
        }
        if self.g.len() != self.h.len() || self.g.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("G must be m x n with m = len(h)"));
        }
        if self.lb.len() != n || self.ub.len() != n {
            return Err(Error::invalid("bounds must have length n"));
        }
        let finite = self.p.iter().flatten().all(|v| v.is_finite())
            && self.c.iter().all(|v| v.is_finite())
            && self.g.iter().flatten().all(|v| v.is_finite())
            && self.h.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("P, c, G, h must be finite"));
        }
        for i in 0..n {
            for j in 0..i {
                if (self.p[i][j] - self.p[j][i]).abs() > 1e-10 {
                    return Err(Error::invalid("P is not symmetric"));
                }
            }
        }
        for (l, u) in self.lb.iter().zip(&self.ub) {
            if l.is_nan() || u.is_nan() || l > u || *l == f64::INFINITY || *u == f64::NEG_INFINITY
            {
                return Err(Error::invalid(format!("invalid bounds [{l}, {u}]")));
            }
        }
        Ok(())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let mut val = 0.0;
        for (i, row) in self.p.iter().enumerate() {
            let pz: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
            val += 0.5 * z[i] * pz + self.c[i] * z[i];
        }
        val
    }

    /// Largest violation of any constraint or bound (0 when feasible).
    pub fn primal_residual(&self, z: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (row, h) in self.g.iter().zip(&self.h) {
            let gz: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
            worst = worst.max(gz - h);
        }
        for ((zi, l), u) in z.iter().zip(&self.lb).zip(&self.ub) {
            worst = worst.max(l - zi).max(zi - u);
        }
        worst
    }

    /// KKT residuals of `result`, each scaled by `1 + ` the magnitude of the data it involves.
    pub fn kkt_residuals(&self, r: &QpResult) -> KktResiduals {
        let n = self.num_vars();
        let z = &r.z;
        let mut scale = 1.0f64;
        let mut stat = 0.0f64;
        for i in 0..n {
            let mut grad = self.c[i];
            for j in 0..n {
                grad += self.p[i][j] * z[j];
            }
            for (k, row) in self.g.iter().enumerate() {
                grad += row[i] * r.lambda[k];
            }
            grad += r.lambda_ub[i] - r.lambda_lb[i];
            scale = scale.max(self.c[i].abs());
            stat = stat.max(grad.abs());
        }
        let mut comp = 0.0f64;
        for (k, (row, h)) in self.g.iter().zip(&self.h).enumerate() {
            let gz: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
            comp = comp.max((r.lambda[k] * (h - gz)).abs() / (1.0 + h.abs()));
        }
        for i in 0..n {
            if self.lb[i].is_finite() {
                comp = comp.max((r.lambda_lb[i] * (z[i] - self.lb[i])).abs() / (1.0 + self.lb[i].abs()));
            }
            if self.ub[i].is_finite() {
                comp = comp.max((r.lambda_ub[i] * (self.ub[i] - z[i])).abs() / (1.0 + self.ub[i].abs()));
            }
        }
        let dual_sign = r
            .lambda
            .iter()
            .chain(&r.lambda_lb)
            .chain(&r.lambda_ub)
            .fold(0.0f64, |acc, v| acc.max(-v));
        KktResiduals {
            stationarity: stat / scale,
            primal: self.primal_residual(z),
            complementarity: comp,
            dual_sign,
        }
    }

    /// Write the problem as TOML (infinite bounds are written as `inf`).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("QP serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: QpProblem = toml::from_str(text).map_err(|e| Error::format(format!("qp: {e}")))?;
        p.validate().map_err(|e| Error::format(e.to_string()))?;
        Ok(p)
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Inequality-only form `A x <= b` used by the interior point iteration.
struct Ineq {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

struct IpmOutcome {
    x: DVector<f64>,
    lambda: DVector<f64>,
    s: DVector<f64>,
    iterations: usize,
    converged: bool,
}

fn solve_spd(m: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let n = m.nrows();
    let mut reg = 0.0;
    for _ in 0..6 {
        let mut mm = m.clone();
        if reg > 0.0 {
            for i in 0..n {
                mm[(i, i)] += reg;
            }
        }
        if let Some(ch) = mm.clone().cholesky() {
            return Some(ch.solve(rhs));
        }
        if let Some(x) = mm.lu().solve(rhs) {
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        let diag = (0..n).map(|i| m[(i, i)].abs()).fold(1.0f64, f64::max);
        reg = if reg == 0.0 { 1e-14 * diag } else { reg * 100.0 };
    }
    None
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut a = 1.0f64;
    for (x, dx) in v.iter().zip(dv.iter()) {
        if *dx < 0.0 {
            a = a.min(-x / dx);
        }
    }
    a
}

/// Mehrotra predictor-corrector for `min 1/2 x'Px + c'x  s.t.  A x <= b`.
fn interior_point(
    p: &DMatrix<f64>,
    c: &DVector<f64>,
    ineq: &Ineq,
    x0: DVector<f64>,
    settings: &QpSettings,
) -> IpmOutcome {
    let m = ineq.b.len();
    let a = &ineq.a;
    let b = &ineq.b;
    let mut x = x0;
    if m == 0 {
        let sol = solve_spd(p.clone(), &(-c));
        let converged = sol.is_some();
        return IpmOutcome {
            x: sol.unwrap_or(x),
            lambda: DVector::zeros(0),
            s: DVector::zeros(0),
            iterations: 1,
            converged,
        };
    }
    let mut s = (b - a * &x).map(|v| v.max(1.0));
    let mut lambda = DVector::from_element(m, 1.0);
    let c_scale = 1.0 + c.amax();
    let b_scale = 1.0 + b.amax();
    let mut best = (f64::INFINITY, x.clone(), lambda.clone(), s.clone());
    for it in 0..settings.max_iterations {
        let r_d = p * &x + c + a.transpose() * &lambda;
        let r_p = a * &x + &s - b;
        let mu = s.dot(&lambda) / m as f64;
        let err = (r_d.amax() / c_scale).max(r_p.amax() / b_scale).max(mu);
        if err < best.0 {
            best = (err, x.clone(), lambda.clone(), s.clone());
        }
        if err < settings.tolerance {
            return IpmOutcome {
                x,
                lambda,
                s,
                iterations: it,
                converged: true,
            };
        }
        let w = lambda.component_div(&s);
        let mut kkt = p.clone();
        for k in 0..m {
            let row = a.row(k);
            kkt += w[k] * row.transpose() * row;
        }
        let newton = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
            let inner = w.component_mul(&r_p) - r_c.component_div(&s);
            let rhs = -&r_d - a.transpose() * &inner;
            let dx = solve_spd(kkt.clone(), &rhs)?;
            let ds = -&r_p - a * &dx;
            let dl = w.component_mul(&(a * &dx + &r_p)) - r_c.component_div(&s);
            Some((dx, ds, dl))
        };
        let r_c_aff = s.component_mul(&lambda);
        let Some((_, ds_a, dl_a)) = newton(&r_c_aff) else {
            break;
        };
        let alpha_aff = max_step(&s, &ds_a).min(max_step(&lambda, &dl_a));
        let mu_aff = (&s + alpha_aff * &ds_a).dot(&(&lambda + alpha_aff * &dl_a)) / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let r_c = &r_c_aff + ds_a.component_mul(&dl_a) - DVector::from_element(m, sigma * mu);
        let Some((dx, ds, dl)) = newton(&r_c) else {
            break;
        };
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&lambda, &dl))).min(1.0);
        x += alpha * dx;
        s += alpha * ds;
        lambda += alpha * dl;
        // keep strictly interior
        s.iter_mut().for_each(|v| *v = v.max(1e-300));
        lambda.iter_mut().for_each(|v| *v = v.max(1e-300));
    }
    IpmOutcome {
        x: best.1,
        lambda: best.2,
        s: best.3,
        iterations: settings.max_iterations,
        converged: false,
    }
}

/// The reduced problem over variables not fixed by `lb == ub`.
struct Reduced {
    free: Vec<usize>,
    fixed_value: Vec<f64>,
    p: DMatrix<f64>,
    c: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
}

fn reduce(prob: &QpProblem) -> Reduced {
    let n = prob.num_vars();
    let free: Vec<usize> = (0..n).filter(|&i| prob.lb[i] < prob.ub[i]).collect();
    let fixed_value: Vec<f64> = (0..n)
        .map(|i| if prob.lb[i] == prob.ub[i] { prob.lb[i] } else { 0.0 })
        .collect();
    let nf = free.len();
    let mrows = prob.num_constraints();
    let p = DMatrix::from_fn(nf, nf, |i, j| prob.p[free[i]][free[j]]);
    let c = DVector::from_fn(nf, |i, _| {
        let fi = free[i];
        prob.c[fi] + (0..n).map(|j| prob.p[fi][j] * fixed_value[j]).sum::<f64>()
    });
    let g = DMatrix::from_fn(mrows, nf, |k, j| prob.g[k][free[j]]);
    let h = DVector::from_fn(mrows, |k, _| {
        let hk = prob.h[k] - (0..n).map(|j| prob.g[k][j] * fixed_value[j]).sum::<f64>();
        // A zero row with h >= 0 never binds; give it unit slack so it cannot
        // pin the interior point to the boundary. Negative h stays and makes
        // Phase I report infeasibility.
        if hk >= 0.0 && g.row(k).iter().all(|v| *v == 0.0) {
            hk.max(1.0)
        } else {
            hk
        }
    });
    Reduced {
        lb: free.iter().map(|&i| prob.lb[i]).collect(),
        ub: free.iter().map(|&i| prob.ub[i]).collect(),
        free,
        fixed_value,
        p,
        c,
        g,
        h,
    }
}

/// Stack `G` and finite bounds into `A x <= b`. Returns the row index of each
/// bound row, or `None` if the bound is infinite.
fn stack(
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    lb: &[f64],
    ub: &[f64],
) -> (Ineq, Vec<Option<usize>>, Vec<Option<usize>>) {
    let n = g.ncols();
    let mut rows: Vec<(Vec<f64>, f64)> = (0..g.nrows())
        .map(|k| (g.row(k).iter().copied().collect(), h[k]))
        .collect();
    let mut lb_row = vec![None; n];
    let mut ub_row = vec![None; n];
    for i in 0..n {
        if ub[i].is_finite() {
            let mut r = vec![0.0; n];
            r[i] = 1.0;
            ub_row[i] = Some(rows.len());
            rows.push((r, ub[i]));
        }
        if lb[i].is_finite() {
            let mut r = vec![0.0; n];
            r[i] = -1.0;
            lb_row[i] = Some(rows.len());
            rows.push((r, -lb[i]));
        }
    }
    let a = DMatrix::from_fn(rows.len(), n, |k, j| rows[k].0[j]);
    let b = DVector::from_fn(rows.len(), |k, _| rows[k].1);
    (Ineq { a, b }, lb_row, ub_row)
}

/// Phase I: `min t  s.t.  G x - t <= h, bounds relaxed by t, t >= -1`.
/// Returns the optimal `t` and the corresponding `x`.
fn phase_one(red: &Reduced, settings: &QpSettings) -> (f64, DVector<f64>) {
    let nf = red.free.len();
    let lb: Vec<f64> = red
        .lb
        .iter()
        .map(|l| if l.is_finite() { *l } else { -PHASE1_BOX })
        .collect();
    let ub: Vec<f64> = red
        .ub
        .iter()
        .map(|u| if u.is_finite() { *u } else { PHASE1_BOX })
        .collect();
    let (base, _, _) = stack(&red.g, &red.h, &lb, &ub);
    let rows = base.b.len();
    let mut a = DMatrix::zeros(rows + 1, nf + 1);
    a.view_mut((0, 0), (rows, nf)).copy_from(&base.a);
    for k in 0..rows {
        a[(k, nf)] = -1.0;
    }
    a[(rows, nf)] = -1.0;
    let mut b = DVector::zeros(rows + 1);
    b.rows_mut(0, rows).copy_from(&base.b);
    b[rows] = 1.0;
    let mut c = DVector::zeros(nf + 1);
    c[nf] = 1.0;
    let x0 = DVector::from_fn(nf + 1, |i, _| {
        if i < nf {
            0.0f64.clamp(lb[i], ub[i])
        } else {
            0.0
        }
    });
    let out = interior_point(
        &DMatrix::zeros(nf + 1, nf + 1),
        &c,
        &Ineq { a, b },
        x0,
        settings,
    );
    (out.x[nf], out.x.rows(0, nf).into_owned())
}

struct Dual {
    lambda: Vec<f64>,
    lambda_lb: Vec<f64>,
    lambda_ub: Vec<f64>,
}

/// Solve the equality KKT system of the active set of `x`. Returns `None`
/// when the system is singular or the result fails feasibility / sign checks.
fn polish(red: &Reduced, x: &DVector<f64>, active_g: &[bool], at_lb: &[bool], at_ub: &[bool], tol: f64) -> Option<(DVector<f64>, Dual)> {
    let nf = red.free.len();
    let fixed: Vec<Option<f64>> = (0..nf)
        .map(|i| {
            if at_ub[i] {
                Some(red.ub[i])
            } else if at_lb[i] {
                Some(red.lb[i])
            } else {
                None
            }
        })
        .collect();
    let vars: Vec<usize> = (0..nf).filter(|&i| fixed[i].is_none()).collect();
    let act: Vec<usize> = (0..red.h.len()).filter(|&k| active_g[k]).collect();
    let nv = vars.len();
    let na = act.len();
    let fixed_vec = DVector::from_fn(nf, |i, _| fixed[i].unwrap_or(0.0));
    let mut sol = fixed_vec.clone();
    let mut nu = DVector::zeros(na);
    if nv + na > 0 {
        let mut kkt = DMatrix::zeros(nv + na, nv + na);
        let mut rhs = DVector::zeros(nv + na);
        let pfix = &red.p * &fixed_vec;
        for (a, &i) in vars.iter().enumerate() {
            for (bb, &j) in vars.iter().enumerate() {
                kkt[(a, bb)] = red.p[(i, j)];
            }
            for (r, &k) in act.iter().enumerate() {
                kkt[(a, nv + r)] = red.g[(k, i)];
                kkt[(nv + r, a)] = red.g[(k, i)];
            }
            rhs[a] = -red.c[i] - pfix[i];
        }
        let gfix = &red.g * &fixed_vec;
        for (r, &k) in act.iter().enumerate() {
            rhs[nv + r] = red.h[k] - gfix[k];
        }
        let y = kkt.clone().lu().solve(&rhs)?;
        if !y.iter().all(|v| v.is_finite()) || (&kkt * &y - &rhs).amax() > 1e-9 * (1.0 + rhs.amax()) {
            return None;
        }
        for (a, &i) in vars.iter().enumerate() {
            sol[i] = y[a];
        }
        nu = y.rows(nv, na).into_owned();
    }
    // primal feasibility of the polished point
    let gz = &red.g * &sol;
    for k in 0..red.h.len() {
        if gz[k] - red.h[k] > tol * (1.0 + red.h[k].abs()) {
            return None;
        }
    }
    for i in 0..nf {
        if sol[i] < red.lb[i] - tol * (1.0 + red.lb[i].abs()) || sol[i] > red.ub[i] + tol * (1.0 + red.ub[i].abs()) {
            return None;
        }
    }
    let mut lambda = vec![0.0; red.h.len()];
    for (r, &k) in act.iter().enumerate() {
        if nu[r] < -tol {
            return None;
        }
        lambda[k] = nu[r].max(0.0);
    }
    // bound multipliers from stationarity on fixed variables
    let grad = &red.p * &sol + &red.c + red.g.transpose() * DVector::from_vec(lambda.clone());
    let mut lambda_lb = vec![0.0; nf];
    let mut lambda_ub = vec![0.0; nf];
    let gscale = 1.0 + red.c.amax();
    for i in 0..nf {
        if at_ub[i] {
            if -grad[i] < -tol * gscale {
                return None;
            }
            lambda_ub[i] = (-grad[i]).max(0.0);
        } else if at_lb[i] {
            if grad[i] < -tol * gscale {
                return None;
            }
            lambda_lb[i] = grad[i].max(0.0);
        }
    }
    let _ = x;
    Some((
        sol,
        Dual {
            lambda,
            lambda_lb,
            lambda_ub,
        },
    ))
}

/// Solve a convex QP.
pub fn solve(prob: &QpProblem, settings: &QpSettings) -> Result<QpResult> {
    prob.validate()?;
    let n = prob.num_vars();
    let red = reduce(prob);
    let nf = red.free.len();

    let expand = |xf: &DVector<f64>| -> Vec<f64> {
        let mut z = red.fixed_value.clone();
        for (a, &i) in red.free.iter().enumerate() {
            z[i] = xf[a];
        }
        z
    };
    let finish = |status: QpStatus, z: Vec<f64>, iterations: usize, dual: Option<Dual>| {
        let (lambda, mut lambda_lb, mut lambda_ub) = (
            vec![0.0; prob.num_constraints()],
            vec![0.0; n],
            vec![0.0; n],
        );
        let mut lambda = lambda;
        if let Some(d) = dual {
            lambda = d.lambda;
            for (a, &i) in red.free.iter().enumerate() {
                lambda_lb[i] = d.lambda_lb[a];
                lambda_ub[i] = d.lambda_ub[a];
            }
        }
        // multipliers of eliminated variables follow from stationarity
        if status == QpStatus::Optimal {
            for i in 0..n {
                if red.free.contains(&i) {
                    continue;
                }
                let mut grad = prob.c[i];
                for j in 0..n {
                    grad += prob.p[i][j] * z[j];
                }
                for (k, row) in prob.g.iter().enumerate() {
                    grad += row[i] * lambda[k];
                }
                if grad >= 0.0 {
                    lambda_lb[i] = grad;
                } else {
                    lambda_ub[i] = -grad;
                }
            }
        }
        QpResult {
            status,
            objective: prob.objective(&z),
            primal_residual: prob.primal_residual(&z),
            z,
            iterations,
            lambda,
            lambda_lb,
            lambda_ub,
        }
    };

    if nf == 0 {
        let z = red.fixed_value.clone();
        let status = if prob.primal_residual(&z) <= settings.feasibility_tolerance {
            QpStatus::Optimal
        } else {
            QpStatus::Infeasible
        };
        return Ok(finish(status, z, 0, None));
    }

    let (t, x_feas) = phase_one(&red, settings);
    if !(t <= settings.infeasibility_threshold) {
        return Ok(finish(QpStatus::Infeasible, expand(&x_feas), 0, None));
    }

    let (ineq, lb_row, ub_row) = stack(&red.g, &red.h, &red.lb, &red.ub);
    let out = interior_point(&red.p, &red.c, &ineq, x_feas, settings);
    if !out.converged {
        return Ok(finish(QpStatus::MaxIterations, expand(&out.x), out.iterations, None));
    }

    let is_active = |row: usize| out.lambda[row] > out.s[row];
    let mg = red.h.len();
    let active_g: Vec<bool> = (0..mg).map(is_active).collect();
    let at_lb: Vec<bool> = lb_row.iter().map(|r| r.is_some_and(is_active)).collect();
    let at_ub: Vec<bool> = ub_row.iter().map(|r| r.is_some_and(is_active)).collect();
    let ipm_dual = Dual {
        lambda: (0..mg).map(|k| out.lambda[k]).collect(),
        lambda_lb: lb_row.iter().map(|r| r.map_or(0.0, |k| out.lambda[k])).collect(),
        lambda_ub: ub_row.iter().map(|r| r.map_or(0.0, |k| out.lambda[k])).collect(),
    };
    let ipm_z = expand(&out.x);
    let ipm_obj = prob.objective(&ipm_z);
    let polished = polish(&red, &out.x, &active_g, &at_lb, &at_ub, 1e-9).filter(|(xp, _)| {
        let zp = expand(xp);
        prob.objective(&zp) <= ipm_obj + 1e-9 * (1.0 + ipm_obj.abs())
    });
    let (z, dual) = match polished {
        Some((xp, d)) => (expand(&xp), d),
        None => (ipm_z, ipm_dual),
    };
    let status = if prob.primal_residual(&z) <= settings.feasibility_tolerance {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIterations
    };
    Ok(finish(status, z, out.iterations, Some(dual)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_var(p: f64, c: f64, g: Vec<Vec<f64>>, h: Vec<f64>, lb: f64, ub: f64) -> QpProblem {
        QpProblem {
            p: vec![vec![p]],
            c: vec![c],
            g,
            h,
            lb: vec![lb],
            ub: vec![ub],
        }
    }

    #[test]
    fn active_lower_bound() {
        // min x^2  s.t. x >= 1   (1/2 * 2 x^2)
        let prob = one_var(2.0, 0.0, vec![], vec![], 1.0, f64::INFINITY);
        let r = solve(&prob, &QpSettings::default()).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert_eq!(r.z[0], 1.0);
        assert!((r.objective - 1.0).abs() < 1e-12);
        assert!(prob.kkt_residuals(&r).max() < 1e-9);
    }

    #[test]
    fn unconstrained_minimum() {
        // (x - 2)^2 = x^2 - 4x + 4
        let prob = one_var(2.0, -4.0, vec![], vec![], f64::NEG_INFINITY, f64::INFINITY);
        let r = solve(&prob, &QpSettings::default()).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert!((r.z[0] - 2.0).abs() < 1e-10);
        assert!((r.objective + 4.0).abs() < 1e-10);
    }

    #[test]
    fn contradictory_constraints_are_infeasible() {
        let prob = one_var(2.0, 0.0, vec![vec![1.0], vec![-1.0]], vec![0.0, -1.0], f64::NEG_INFINITY, f64::INFINITY);
        let r = solve(&prob, &QpSettings::default()).unwrap();
        assert_eq!(r.status, QpStatus::Infeasible);
    }

    #[test]
    fn fixed_variables_are_eliminated() {
        let prob = QpProblem {
            p: vec![vec![2.0, 0.0], vec![0.0, 0.0]],
            c: vec![0.0, -1.0],
            g: vec![vec![-1.0, 1.0]],
            h: vec![0.0],
            lb: vec![-5.0, 3.0],
            ub: vec![5.0, 3.0],
        };
        let r = solve(&prob, &QpSettings::default()).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert_eq!(r.z[1], 3.0);
        assert!((r.z[0] - 3.0).abs() < 1e-12);
        assert!(prob.kkt_residuals(&r).max() < 1e-9);
    }

    #[test]
    fn linear_objective_with_zero_curvature() {
        // a^2 - 2a - q  s.t.  a + q <= 4, a in [0, 1]
        let prob = QpProblem {
            p: vec![vec![2.0, 0.0], vec![0.0, 0.0]],
            c: vec![-2.0, -1.0],
            g: vec![vec![1.0, 1.0]],
            h: vec![4.0],
            lb: vec![0.0, f64::NEG_INFINITY],
            ub: vec![1.0, f64::INFINITY],
        };
        let r = solve(&prob, &QpSettings::default()).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        // q = 4 - a leaves a^2 - a - 4, minimized at a = 0.5
        assert!((r.z[0] - 0.5).abs() < 1e-10 && (r.z[1] - 3.5).abs() < 1e-10);
    }

    #[test]
    fn rejects_malformed_problems() {
        let mut prob = one_var(1.0, 0.0, vec![], vec![], 0.0, 1.0);
        prob.lb = vec![2.0];
        assert!(solve(&prob, &QpSettings::default()).is_err());
        let asym = QpProblem {
            p: vec![vec![1.0, 0.5], vec![0.0, 1.0]],
            c: vec![0.0, 0.0],
            g: vec![],
            h: vec![],
            lb: vec![0.0, 0.0],
            ub: vec![1.0, 1.0],
        };
        assert!(solve(&asym, &QpSettings::default()).is_err());
        let bad_dim = one_var(1.0, 0.0, vec![vec![1.0, 2.0]], vec![0.0], 0.0, 1.0);
        assert!(solve(&bad_dim, &QpSettings::default()).is_err());
    }

    #[test]
    fn toml_dump_round_trip() {
        let prob = one_var(2.0, -4.0, vec![vec![1.0]], vec![3.0], f64::NEG_INFINITY, 10.0);
        let back = QpProblem::from_toml(&prob.to_toml()).unwrap();
        assert_eq!(back, prob);
    }
}
