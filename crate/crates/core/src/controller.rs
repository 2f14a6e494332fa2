//! Conformal tube MPC.
//!
//! The decision vector is `z = (a_0, ..., a_{N-1}, q)`. Tube half-widths are
//! fixed by the initial box, so box centers are affine in the accelerations and
//! every safety row `C x + q C_abs r <= b` is linear in `z`. Maximizing `q`
//! (through `-rho q`) shrinks the certified miscoverage rate.

use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalCalibrator, Quantile};
use crate::error::{Error, Result};
use crate::kinematics::{mat_vec, KinematicsModel, Mat3, StateVector};
use crate::qp::{self, QpProblem, QpSettings, QpStatus};
use crate::tube::{half_width_trajectory, rollout, ConformalBox, ConformalTube};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt_plan: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    /// Stopping distance (m).
    pub d_s: f64,
    /// Time headway (s).
    pub t_s: f64,
    /// Control effort weight.
    pub r1: f64,
    /// Control smoothness weight.
    pub r2: f64,
    /// Relative-speed tracking weight.
    pub q1: f64,
    /// Set-speed tracking weight.
    pub q2: f64,
    /// Reward per unit of tube scale.
    pub rho: f64,
    /// Set speed (m/s).
    pub v_s: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            dt_plan: 1.0,
            v_min: 0.0,
            v_max: 20.0,
            a_min: -6.0,
            a_max: 6.0,
            d_s: 10.0,
            t_s: 0.0,
            r1: 1.0,
            r2: 5.0,
            q1: 1.0,
            q2: 10.0,
            rho: 100.0,
            v_s: 15.0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.dt_plan, self.v_min, self.v_max, self.a_min, self.a_max, self.d_s, self.t_s, self.r1,
            self.r2, self.q1, self.q2, self.rho, self.v_s,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::invalid("MPC parameters must be finite"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if self.dt_plan <= 0.0 {
            return Err(Error::invalid("dt_plan must be positive"));
        }
        if self.v_min >= self.v_max || self.a_min >= self.a_max {
            return Err(Error::invalid("need v_min < v_max and a_min < a_max"));
        }
        if self.d_s <= 0.0 || self.t_s < 0.0 {
            return Err(Error::invalid("need d_s > 0 and t_s >= 0"));
        }
        if [self.r1, self.r2, self.q1, self.q2, self.rho].iter().any(|w| *w <= 0.0) {
            return Err(Error::invalid("weights must be positive"));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<KinematicsModel> {
        KinematicsModel::new(self.dt_plan)
    }
}

/// Safety rows `C x <= b` and the element-wise absolute value of `C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintRows {
    pub c: Mat3,
    pub b: [f64; 3],
    pub c_abs: Mat3,
}

impl ConstraintRows {
    /// Per-row slack `b - C x`; negative entries are violations.
    pub fn slack(&self, x: StateVector) -> [f64; 3] {
        let cx = mat_vec(&self.c, x.to_array());
        std::array::from_fn(|i| self.b[i] - cx[i])
    }
}

pub fn build_constraint_rows(cfg: &MpcConfig) -> ConstraintRows {
    let c = [[-1.0, 0.0, cfg.t_s], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]];
    let mut c_abs = c;
    c_abs.iter_mut().flatten().for_each(|v| *v = v.abs());
    ConstraintRows {
        c,
        b: [-cfg.d_s, cfg.v_max, -cfg.v_min],
        c_abs,
    }
}

/// An assembled planning QP and the data needed to read its solution back.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledQp {
    pub problem: QpProblem,
    /// Objective terms dropped from the QP (so the full cost is `qp + constant`).
    pub constant: f64,
    pub horizon: usize,
}

impl AssembledQp {
    pub fn q_index(&self) -> usize {
        self.horizon
    }
}

/// Build the planning QP. `q_cap` is the upper bound on the tube scale.
pub fn assemble_qp(box0: &ConformalBox, cfg: &MpcConfig, a_prev: f64, q_cap: f64) -> Result<AssembledQp> {
    cfg.validate()?;
    if !box0.center.is_finite() || box0.half.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::invalid("initial box must be finite with nonnegative half-widths"));
    }
    if !a_prev.is_finite() || q_cap.is_nan() {
        return Err(Error::invalid("a_prev and q_cap must be numbers"));
    }
    let n = cfg.horizon;
    let nz = n + 1;
    let model = cfg.model()?;
    let rows = build_constraint_rows(cfg);

    // Free response and per-control sensitivities of the centers.
    let mut free = vec![box0.center];
    for i in 0..n {
        free.push(model.step(free[i], 0.0)?);
    }
    // sens[i][j] = d x_i / d a_j = A^(i-1-j) B for j < i.
    let mut sens = vec![vec![[0.0; 3]; n]; n + 1];
    for i in 1..=n {
        for j in 0..i {
            sens[i][j] = if j == i - 1 {
                model.b()
            } else {
                mat_vec(model.a(), sens[i - 1][j])
            };
        }
    }
    let halves = half_width_trajectory(box0.half, n, &model);

    let mut p = vec![vec![0.0; nz]; nz];
    let mut c = vec![0.0; nz];
    let mut constant = 0.0;
    for j in 0..n {
        p[j][j] += 2.0 * cfg.r1;
        // smoothness (a_j - a_{j-1})^2, with a_{-1} = a_prev
        p[j][j] += 2.0 * cfg.r2;
        if j == 0 {
            c[0] -= 2.0 * cfg.r2 * a_prev;
            constant += cfg.r2 * a_prev * a_prev;
        } else {
            p[j - 1][j - 1] += 2.0 * cfg.r2;
            p[j][j - 1] -= 2.0 * cfg.r2;
            p[j - 1][j] -= 2.0 * cfg.r2;
        }
    }
    for i in 1..=n {
        // tracking: q1 dv^2 + q2 (v - v_s)^2
        for (state_idx, weight, target) in [(1usize, cfg.q1, 0.0), (2usize, cfg.q2, cfg.v_s)] {
            let offset = free[i].to_array()[state_idx] - target;
            constant += weight * offset * offset;
            for j in 0..i {
                let mj = sens[i][j][state_idx];
                c[j] += 2.0 * weight * offset * mj;
                for k in 0..i {
                    p[j][k] += 2.0 * weight * mj * sens[i][k][state_idx];
                }
            }
        }
    }
    c[n] = -cfg.rho;

    let mut g = Vec::with_capacity(3 * (n + 1));
    let mut h = Vec::with_capacity(3 * (n + 1));
    for i in 0..=n {
        let cr = mat_vec(&rows.c_abs, halves[i]);
        let cx = mat_vec(&rows.c, free[i].to_array());
        for row in 0..3 {
            let mut line = vec![0.0; nz];
            for j in 0..i {
                line[j] = rows.c[row].iter().zip(sens[i][j]).map(|(a, b)| a * b).sum();
            }
            line[n] = cr[row];
            g.push(line);
            h.push(rows.b[row] - cx[row]);
        }
    }
    let mut lb = vec![cfg.a_min; nz];
    let mut ub = vec![cfg.a_max; nz];
    lb[n] = f64::NEG_INFINITY;
    ub[n] = q_cap;
    Ok(AssembledQp {
        problem: QpProblem { p, c, g, h, lb, ub },
        constant,
        horizon: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Nominal,
    Contingency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub accels: Vec<f64>,
    pub q_hat: f64,
    /// `1 - #{scores <= q_hat} / (n + 1)`; 1 under contingency.
    pub alpha_hat: f64,
    /// `1 - 2 alpha_hat`, clamped to `[0, 1]`; 0 under contingency.
    pub safety_bound: f64,
    /// Tube at scale `q_hat`; absent under contingency.
    pub tube: Option<ConformalTube>,
    pub mode: Mode,
    pub status: QpStatus,
    /// Full planning cost including terms constant in `z`.
    pub objective: f64,
    /// Largest scaled KKT residual of the QP solution (0 when not solved).
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl MpcSolution {
    pub fn first_accel(&self) -> f64 {
        self.accels[0]
    }

    fn contingency(cfg: &MpcConfig, status: QpStatus, q_hat: f64, iterations: usize) -> Self {
        Self {
            accels: vec![cfg.a_min; cfg.horizon],
            q_hat,
            alpha_hat: 1.0,
            safety_bound: 0.0,
            tube: None,
            mode: Mode::Contingency,
            status,
            objective: f64::NAN,
            kkt_residual: 0.0,
            iterations,
        }
    }
}

fn bound_from_alpha(alpha_hat: f64) -> f64 {
    (1.0 - 2.0 * alpha_hat).clamp(0.0, 1.0)
}

fn solve_assembled(
    asm: &AssembledQp,
    box0: &ConformalBox,
    cfg: &MpcConfig,
    cal: &ConformalCalibrator,
    settings: &QpSettings,
) -> Result<MpcSolution> {
    let res = qp::solve(&asm.problem, settings)?;
    let n = asm.horizon;
    let q_hat = res.z[asm.q_index()];
    if res.status != QpStatus::Optimal || q_hat < 0.0 {
        return Ok(MpcSolution::contingency(cfg, res.status, q_hat, res.iterations));
    }
    // accelerations are clamped against solver round-off only
    let accels: Vec<f64> = res.z[..n].iter().map(|a| a.clamp(cfg.a_min, cfg.a_max)).collect();
    let alpha_hat = cal.inverse_alpha(q_hat);
    let tube_box = ConformalBox {
        quantile: Quantile::Finite(q_hat),
        alpha: alpha_hat,
        ..*box0
    };
    let tube = rollout(&tube_box, &accels, &cfg.model()?)?;
    Ok(MpcSolution {
        accels,
        q_hat,
        alpha_hat,
        safety_bound: bound_from_alpha(alpha_hat),
        tube: Some(tube),
        mode: Mode::Nominal,
        status: res.status,
        objective: res.objective + asm.constant,
        kkt_residual: asm.problem.kkt_residuals(&res).max(),
        iterations: res.iterations,
    })
}

/// Plan with the tube scale as a decision variable, capped at the largest
/// calibration score. Solver failures and empty tubes fall back to full braking.
///
/// Every scale in `[s_k, s_{k+1})` between consecutive calibration scores
/// certifies the same miscoverage, so the joint optimum is snapped down to the
/// score `s_k` (the conformal quantile at the certified rate) and the
/// accelerations are re-solved with the scale pinned there. The snapped tube
/// lies inside the joint one and so stays feasible; the result is exactly the
/// fixed-rate plan at the certified rate.
pub fn plan(box0: &ConformalBox, cfg: &MpcConfig, a_prev: f64, cal: &ConformalCalibrator) -> Result<MpcSolution> {
    plan_with(box0, cfg, a_prev, cal, &QpSettings::default())
}

pub fn plan_with(
    box0: &ConformalBox,
    cfg: &MpcConfig,
    a_prev: f64,
    cal: &ConformalCalibrator,
    settings: &QpSettings,
) -> Result<MpcSolution> {
    let mut asm = assemble_qp(box0, cfg, a_prev, cal.max_score())?;
    let joint = solve_assembled(&asm, box0, cfg, cal, settings)?;
    if joint.mode == Mode::Contingency {
        return Ok(joint);
    }
    let Some(snapped) = cal.quantile(joint.alpha_hat).finite() else {
        return Ok(joint);
    };
    if snapped == joint.q_hat {
        return Ok(joint);
    }
    let qi = asm.q_index();
    asm.problem.lb[qi] = snapped;
    asm.problem.ub[qi] = snapped;
    let pinned = solve_assembled(&asm, box0, cfg, cal, settings)?;
    Ok(match pinned.mode {
        Mode::Nominal => MpcSolution {
            iterations: joint.iterations + pinned.iterations,
            ..pinned
        },
        Mode::Contingency => joint,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum FixedAlphaPlan {
    Solved(MpcSolution),
    Infeasible(String),
}

/// Plan with the tube scale pinned at the conformal quantile for `alpha`.
pub fn fixed_alpha_plan(
    box0: &ConformalBox,
    cfg: &MpcConfig,
    a_prev: f64,
    cal: &ConformalCalibrator,
    alpha: f64,
) -> Result<FixedAlphaPlan> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let q = match cal.quantile(alpha) {
        Quantile::Finite(q) => q,
        Quantile::Infinite => {
            return Ok(FixedAlphaPlan::Infeasible(format!(
                "alpha {alpha} is below 1/(n+1) for n = {}; the tube is unbounded",
                cal.n()
            )))
        }
    };
    let mut asm = assemble_qp(box0, cfg, a_prev, q)?;
    let qi = asm.q_index();
    asm.problem.lb[qi] = q;
    asm.problem.ub[qi] = q;
    let sol = solve_assembled(&asm, box0, cfg, cal, &QpSettings::default())?;
    Ok(match sol.mode {
        Mode::Nominal => FixedAlphaPlan::Solved(sol),
        Mode::Contingency => FixedAlphaPlan::Infeasible(format!("solver status {:?} at q = {q}", sol.status)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SafetyReport {
    Bound { alpha_hat: f64, lower_bound: f64 },
    NoBound,
}

/// Recompute the certified miscoverage rate of a solution from its tube scale.
pub fn safety_report(sol: &MpcSolution, cal: &ConformalCalibrator) -> Result<SafetyReport> {
    if sol.mode == Mode::Contingency {
        return Ok(SafetyReport::NoBound);
    }
    let alpha_hat = cal.inverse_alpha(sol.q_hat);
    if alpha_hat != sol.alpha_hat {
        return Err(Error::invalid(format!(
            "stored alpha_hat {} disagrees with recomputed {alpha_hat}",
            sol.alpha_hat
        )));
    }
    Ok(SafetyReport::Bound {
        alpha_hat,
        lower_bound: bound_from_alpha(alpha_hat),
    })
}

/// Largest violation of `C x <= b` over every corner of every tube box.
pub fn tube_violation(tube: &ConformalTube, cfg: &MpcConfig) -> f64 {
    let rows = build_constraint_rows(cfg);
    tube.boxes
        .iter()
        .filter_map(|b| b.corners())
        .flatten()
        .flat_map(|x| rows.slack(x))
        .fold(0.0f64, |acc, s| acc.max(-s))
}
