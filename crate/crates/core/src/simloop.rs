//! Closed-loop episodes: true plant, perception, tube MPC and metrics.
//!
//! The plant integrates at `dt_sim` and the controller replans every step
//! over a horizon discretized at `dt_plan`. The box pairs the current
//! estimate with the one from `dt_plan` earlier; before the episode starts
//! that earlier estimate comes from a constant-speed history.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, interval, ConformalCalibrator, Quantile, ScoredPoint};
use crate::controller::{build_constraint_rows, plan, MpcConfig, Mode};
use crate::ensemble::{Ensemble, EnsembleEstimate};
use crate::error::{Error, Result};
use crate::kinematics::{KinematicsModel, StateVector};
use crate::qp::QpStatus;
use crate::scenario::{fgsm_perturb, render_ood, split_rng, AttackConfig, LeadProfile, OodConfig, SensorModel, Split};
use crate::tube::{box_from_moments, rollout, ConformalBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub duration: f64,
    pub dt_sim: f64,
    pub initial_headway: f64,
    pub initial_speed: f64,
    pub lead: LeadProfile,
    #[serde(default)]
    pub sensor: SensorModel,
    #[serde(default)]
    pub ood: OodConfig,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub mpc: MpcConfig,
    pub seed: u64,
}

impl EpisodeConfig {
    /// Plan-step length in sim steps.
    pub fn plan_ratio(&self) -> usize {
        (self.mpc.dt_plan / self.dt_sim).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::invalid("duration must be positive"));
        }
        if !(self.dt_sim.is_finite() && self.dt_sim > 0.0) {
            return Err(Error::invalid("dt_sim must be positive"));
        }
        self.mpc.validate()?;
        let ratio = self.mpc.dt_plan / self.dt_sim;
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::invalid("dt_plan must be an integer multiple of dt_sim"));
        }
        if !(self.initial_headway.is_finite() && self.initial_headway > 0.0) {
            return Err(Error::invalid("initial headway must be positive"));
        }
        if !(self.initial_speed.is_finite() && self.initial_speed >= 0.0) {
            return Err(Error::invalid("initial speed must be >= 0"));
        }
        self.lead.validate()?;
        self.sensor.validate()?;
        self.ood.validate()?;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt_sim).round() as usize
    }

    pub fn initial_state(&self) -> StateVector {
        StateVector::new(
            self.initial_headway,
            self.lead.speed(0.0) - self.initial_speed,
            self.initial_speed,
        )
    }
}

/// One simulation step. Column order of the episode CSV follows field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub d: f64,
    pub dv: f64,
    pub v: f64,
    pub v_lead: f64,
    pub mu: f64,
    pub sigma: f64,
    pub center_d: f64,
    pub center_dv: f64,
    pub center_v: f64,
    pub half_d: f64,
    pub half_dv: f64,
    pub half_v: f64,
    /// Tube scale; empty under contingency.
    pub q_hat: Option<f64>,
    pub alpha_hat: f64,
    pub safety_bound: f64,
    pub accel: f64,
    pub mode: Mode,
    pub status: QpStatus,
    pub iterations: usize,
    /// `d >= d_s + T_s v` at this step.
    pub safe: bool,
    /// Open-loop replay of the plan stays in its tube; empty under contingency.
    pub tube_contained: Option<bool>,
    pub collision: bool,
}

impl StepRecord {
    pub fn state(&self) -> StateVector {
        StateVector::new(self.d, self.dv, self.v)
    }

    pub fn state_box(&self, q: Quantile) -> ConformalBox {
        ConformalBox {
            center: StateVector::new(self.center_d, self.center_dv, self.center_v),
            half: [self.half_d, self.half_dv, self.half_v],
            quantile: q,
            alpha: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub records: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn collided(&self) -> bool {
        self.records.last().is_some_and(|r| r.collision)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.records {
            wr.serialize(r).map_err(|e| Error::format(format!("episode csv: {e}")))?;
        }
        wr.flush().map_err(|e| Error::format(format!("episode csv: {e}")))
    }

    /// Parse an episode CSV. Errors name the offending line.
    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut records: Vec<StepRecord> = Vec::new();
        for (i, rec) in rd.deserialize().enumerate() {
            let line = i + 2;
            let rec: StepRecord = rec.map_err(|e| Error::format(format!("line {line}: {e}")))?;
            let finite = [rec.t, rec.d, rec.dv, rec.v, rec.v_lead, rec.accel, rec.alpha_hat, rec.safety_bound]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::format(format!("line {line}: non-finite value")));
            }
            if let Some(prev) = records.last() {
                if rec.t <= prev.t {
                    return Err(Error::format(format!("line {line}: timestamps not increasing")));
                }
            }
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::format("episode has no rows"));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// Advance the true plant by `h` seconds. The ego speed is floored at 0.
pub fn plant_step(x: StateVector, accel: f64, lead: &LeadProfile, t: f64, h: f64) -> StateVector {
    let v = x.v;
    let (v_next, ego_disp) = if v + accel * h >= 0.0 {
        (v + accel * h, (v + 0.5 * accel * h) * h)
    } else {
        // stops within the step
        (0.0, v * v / (2.0 * -accel))
    };
    let (l0, l1) = (lead.speed(t), lead.speed(t + h));
    let d = x.d + 0.5 * (l0 + l1) * h - ego_disp;
    StateVector::new(d, l1 - v_next, v_next)
}

/// Weighted mean of the last `m` sim-step accelerations (oldest first) that
/// reproduces the headway change over the window under a constant lead speed.
pub fn effective_accel(history: &[f64]) -> f64 {
    let m = history.len() as f64;
    history
        .iter()
        .enumerate()
        .map(|(i, a)| a * (2.0 * i as f64 + 1.0))
        .sum::<f64>()
        / (m * m)
}

/// Replay `accels` (each held for `dt_plan`) on the true plant and return the
/// states at every plan step, starting with `x0`.
pub fn replay(x0: StateVector, accels: &[f64], lead: &LeadProfile, t0: f64, dt_plan: f64, sub: usize) -> Vec<StateVector> {
    let h = dt_plan / sub as f64;
    let mut out = vec![x0];
    let mut x = x0;
    let mut t = t0;
    for &a in accels {
        for _ in 0..sub {
            x = plant_step(x, a, lead, t, h);
            t += h;
        }
        out.push(x);
    }
    out
}

struct Perception<'a, R: Rng> {
    ensemble: &'a Ensemble,
    cfg: &'a EpisodeConfig,
    rng: R,
}

impl<R: Rng> Perception<'_, R> {
    fn estimate(&mut self, d: f64) -> Result<EnsembleEstimate> {
        let mut f = render_ood(d.max(0.0), &self.cfg.sensor, &self.cfg.ood, &mut self.rng);
        if let Some(atk) = &self.cfg.attack {
            f = fgsm_perturb(&f, &self.ensemble.members, d.max(0.0), atk)?;
        }
        self.ensemble.predict(&f)
    }
}

/// Run one closed-loop episode.
pub fn run_episode(cfg: &EpisodeConfig, ensemble: &Ensemble, cal: &ConformalCalibrator) -> Result<EpisodeLog> {
    cfg.validate()?;
    let m = cfg.plan_ratio();
    let h = cfg.dt_sim;
    let plan_model = KinematicsModel::new(cfg.mpc.dt_plan)?;
    let rows = build_constraint_rows(&cfg.mpc);
    let mut perc = Perception {
        ensemble,
        cfg,
        rng: split_rng(cfg.seed, Split::Episode),
    };

    let x0 = cfg.initial_state();
    // Estimates at t = -dt_plan .. -dt_sim from a constant-speed past.
    let mut estimates = Vec::with_capacity(m + cfg.steps());
    for j in (1..=m).rev() {
        let d_past = x0.d - x0.dv * (j as f64 * h);
        estimates.push(perc.estimate(d_past)?);
    }
    let mut accels = vec![0.0; m];
    let mut x = x0;
    let mut records = Vec::with_capacity(cfg.steps());
    for k in 0..cfg.steps() {
        let t = k as f64 * h;
        let now = perc.estimate(x.d)?;
        let prev = &estimates[k];
        let a_eff = effective_accel(&accels[accels.len() - m..]);
        let a_last = *accels.last().unwrap();
        let box0 = box_from_moments(
            now.mu,
            now.sigma(),
            prev.mu,
            prev.sigma(),
            a_eff,
            x.v,
            Quantile::Finite(1.0),
            f64::NAN,
            &plan_model,
        )?;
        let sol = plan(&box0, &cfg.mpc, a_last, cal)?;
        let accel = sol.first_accel().clamp(cfg.mpc.a_min, cfg.mpc.a_max);
        let tube_contained = match &sol.tube {
            Some(tube) => {
                let traj = replay(x, &sol.accels, &cfg.lead, t, cfg.mpc.dt_plan, m);
                Some(tube.contains_trajectory(&traj, 1e-9))
            }
            None => None,
        };
        let collision = x.d <= 0.0;
        records.push(StepRecord {
            t,
            d: x.d,
            dv: x.dv,
            v: x.v,
            v_lead: x.lead_speed(),
            mu: now.mu,
            sigma: now.sigma(),
            center_d: box0.center.d,
            center_dv: box0.center.dv,
            center_v: box0.center.v,
            half_d: box0.half[0],
            half_dv: box0.half[1],
            half_v: box0.half[2],
            q_hat: (sol.mode == Mode::Nominal).then_some(sol.q_hat),
            alpha_hat: sol.alpha_hat,
            safety_bound: sol.safety_bound,
            accel,
            mode: sol.mode,
            status: sol.status,
            iterations: sol.iterations,
            safe: rows.slack(x)[0] >= 0.0,
            tube_contained,
            collision,
        });
        if collision {
            break;
        }
        estimates.push(now);
        accels.push(accel);
        x = plant_step(x, accel, &cfg.lead, t, h);
    }
    Ok(EpisodeLog { records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub alpha: f64,
    pub quantile: Option<f64>,
    pub interval_coverage: f64,
    pub box_coverage: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub rows: Vec<CoverageRow>,
    /// Fraction of nominal planning instants whose open-loop replay stayed in the tube.
    pub tube_coverage: Option<f64>,
    pub tube_instants: usize,
}

/// Interval, box and tube coverage over logged episodes.
pub fn coverage_metrics(logs: &[EpisodeLog], cal: &ConformalCalibrator, alphas: &[f64]) -> Result<CoverageTable> {
    let records: Vec<&StepRecord> = logs.iter().flat_map(|l| &l.records).collect();
    if records.is_empty() {
        return Err(Error::invalid("no records to evaluate"));
    }
    let n = records.len() as f64;
    let rows = alphas
        .iter()
        .map(|&alpha| {
            let q = cal.quantile(alpha);
            let iv = records
                .iter()
                .filter(|r| interval(r.mu, r.sigma, q).contains(r.d))
                .count();
            let bx = records
                .iter()
                .filter(|r| r.state_box(q).contains(r.state(), 1e-9))
                .count();
            CoverageRow {
                alpha,
                quantile: q.finite(),
                interval_coverage: iv as f64 / n,
                box_coverage: bx as f64 / n,
                samples: records.len(),
            }
        })
        .collect();
    let flags: Vec<bool> = records.iter().filter_map(|r| r.tube_contained).collect();
    Ok(CoverageTable {
        rows,
        tube_coverage: (!flags.is_empty()).then(|| flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64),
        tube_instants: flags.len(),
    })
}

/// Interval coverage on labelled test points for each `alpha`.
pub fn dataset_coverage(points: &[ScoredPoint], cal: &ConformalCalibrator, alphas: &[f64]) -> Result<Vec<(f64, f64)>> {
    alphas
        .iter()
        .map(|&a| Ok((a, cal.empirical_coverage(points, a)?)))
        .collect()
}

/// Interval length `2 q sigma` of every logged step at a fixed quantile;
/// `None` when the quantile is infinite.
pub fn interval_lengths(logs: &[EpisodeLog], q: Quantile) -> Option<Vec<f64>> {
    let q = q.finite()?;
    Some(logs.iter().flat_map(|l| &l.records).map(|r| 2.0 * q * r.sigma).collect())
}

/// Median interval length that gives `1 - alpha` coverage on the logged steps
/// themselves: the quantile is recalibrated on the steps' own scores, so the
/// length grows whenever perception errors outpace the reported sigma.
/// `None` when too few steps support a finite quantile.
pub fn needed_interval_length(logs: &[EpisodeLog], alpha: f64) -> Result<Option<f64>> {
    let points: Vec<ScoredPoint> = logs
        .iter()
        .flat_map(|l| &l.records)
        .map(|r| ScoredPoint::new(r.mu, r.sigma, r.d))
        .collect();
    if points.is_empty() {
        return Err(Error::invalid("no records to evaluate"));
    }
    let cal = calibrate(&points)?;
    Ok(interval_lengths(logs, cal.quantile(alpha)).and_then(|mut v| median(&mut v)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyMetrics {
    /// Fraction of steps with `d < d_s + T_s v`.
    pub violation_fraction: f64,
    /// Same, counting only steps at or after `transient`.
    pub post_transient_violation_fraction: f64,
    pub min_headway: f64,
    pub contingency_steps: usize,
    pub collided: bool,
    /// `1 - 2 alpha_hat` per step (0 under contingency).
    pub bound_trace: Vec<f64>,
}

pub fn safety_metrics(log: &EpisodeLog, transient: f64) -> Result<SafetyMetrics> {
    if log.records.is_empty() {
        return Err(Error::invalid("empty episode"));
    }
    let frac = |rs: &[&StepRecord]| {
        if rs.is_empty() {
            0.0
        } else {
            rs.iter().filter(|r| !r.safe).count() as f64 / rs.len() as f64
        }
    };
    let all: Vec<&StepRecord> = log.records.iter().collect();
    let post: Vec<&StepRecord> = log.records.iter().filter(|r| r.t >= transient).collect();
    Ok(SafetyMetrics {
        violation_fraction: frac(&all),
        post_transient_violation_fraction: frac(&post),
        min_headway: log.records.iter().map(|r| r.d).fold(f64::INFINITY, f64::min),
        contingency_steps: log.records.iter().filter(|r| r.mode == Mode::Contingency).count(),
        collided: log.collided(),
        bound_trace: log.records.iter().map(|r| r.safety_bound).collect(),
    })
}

/// Median of the nominal `alpha_hat` values, if any.
pub fn median_alpha_hat(log: &EpisodeLog) -> Option<f64> {
    let mut v: Vec<f64> = log
        .records
        .iter()
        .filter(|r| r.mode == Mode::Nominal)
        .map(|r| r.alpha_hat)
        .collect();
    median(&mut v)
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Outcome of one isolated planning instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeTrial {
    pub nominal: bool,
    pub alpha_hat: f64,
    pub contained: bool,
}

/// Draw a state and a constant-speed lead, perceive it at `t - dt_plan` and
/// `t` under a constant previous acceleration, plan, and check whether the
/// true open-loop trajectory stays inside the solved tube.
pub fn tube_trial(
    ensemble: &Ensemble,
    cal: &ConformalCalibrator,
    sensor: &SensorModel,
    mpc: &MpcConfig,
    rng: &mut impl Rng,
) -> Result<TubeTrial> {
    let model = mpc.model()?;
    let dt = mpc.dt_plan;
    let v = rng.random_range(2.0..mpc.v_max - 2.0);
    let v_lead: f64 = rng.random_range(2.0..mpc.v_max - 2.0);
    let a_prev = rng.random_range(-1.0..1.0);
    let d = rng.random_range(mpc.d_s + 15.0..55.0);
    // one step back under constant lead speed and ego acceleration a_prev
    let v_prev = v - a_prev * dt;
    let d_prev = d - (v_lead * dt - (v_prev * dt + 0.5 * a_prev * dt * dt));
    let ood = OodConfig::in_distribution();
    let e_prev = ensemble.predict(&render_ood(d_prev.max(0.0), sensor, &ood, rng))?;
    let e_now = ensemble.predict(&render_ood(d, sensor, &ood, rng))?;
    let box0 = box_from_moments(e_now.mu, e_now.sigma(), e_prev.mu, e_prev.sigma(), a_prev, v, Quantile::Finite(1.0), f64::NAN, &model)?;
    let sol = plan(&box0, mpc, a_prev, cal)?;
    let Some(tube) = sol.tube else {
        return Ok(TubeTrial {
            nominal: false,
            alpha_hat: 1.0,
            contained: false,
        });
    };
    let lead = LeadProfile::Constant { speed: v_lead };
    let truth = StateVector::new(d, v_lead - v, v);
    let traj = replay(truth, &sol.accels, &lead, 0.0, dt, 1);
    let check = rollout(&tube.boxes[0], &sol.accels, &model)?;
    debug_assert_eq!(check, tube);
    Ok(TubeTrial {
        nominal: true,
        alpha_hat: sol.alpha_hat,
        contained: tube.contains_trajectory(&traj, 1e-9),
    })
}
