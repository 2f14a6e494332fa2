//! The pipeline stages. Each reads earlier stages' outputs from the run
//! directory and writes its own subdirectory atomically.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ctmpc_core::config::RunConfig;
use ctmpc_core::conformal::{calibrate as fit_calibrator, interval, ConformalCalibrator, Quantile, ScoredPoint};
use ctmpc_core::controller::Mode;
use ctmpc_core::ensemble::{Ensemble, MemberNetwork};
use ctmpc_core::scenario::{AttackConfig, Dataset};
use ctmpc_core::simloop::{
    coverage_metrics, dataset_coverage, interval_lengths, median, median_alpha_hat, needed_interval_length,
    run_episode, safety_metrics, EpisodeLog,
};
use ctmpc_core::stats::{mann_whitney_greater, spearman};

use crate::error::{CliError, CliResult};
use crate::run::*;

/// Everything a stage needs besides the config.
pub struct Ctx {
    pub cfg: RunConfig,
    pub run: PathBuf,
    pub parallel: bool,
    /// Overrides the configured episode count.
    pub episodes: Option<usize>,
}

impl Ctx {
    fn episode_count(&self) -> usize {
        self.episodes.unwrap_or(self.cfg.episode.count)
    }

    fn ensure_run_dir(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.run).map_err(|e| io_err(&self.run, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub member: usize,
    pub epoch: usize,
    pub loss: f64,
}

pub fn train(ctx: &Ctx) -> CliResult<PathBuf> {
    let cfg = &ctx.cfg;
    let data = train_set(cfg)?;
    ctx.ensure_run_dir()?;
    let out = StageDir::create(&ctx.run, TRAIN)?;
    let (ensemble, histories) = Ensemble::train(&cfg.members, &data.samples, &cfg.training.base(), ctx.parallel)?;
    for (i, m) in ensemble.members.iter().enumerate() {
        m.save(&out.path(&member_file(i)))?;
    }
    let rows: Vec<LossRow> = histories
        .iter()
        .enumerate()
        .flat_map(|(member, h)| {
            h.iter().enumerate().map(move |(epoch, &loss)| LossRow {
                member,
                epoch: epoch + 1,
                loss,
            })
        })
        .collect();
    write_csv(&out.path("loss.csv"), &rows)?;
    out.commit()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub iteration: usize,
    pub member: usize,
    pub total_weights: usize,
    pub unpruned_weights: usize,
    pub dense_bytes: usize,
    pub sparse_bytes: usize,
}

/// Held-out MAE per iteration; an empty `member` is the fused ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    pub iteration: usize,
    pub member: Option<usize>,
    pub mae: f64,
}

pub fn prune(ctx: &Ctx, iterations: Option<usize>) -> CliResult<PathBuf> {
    let cfg = &ctx.cfg;
    let iterations = iterations.unwrap_or(cfg.pruning.iterations);
    let dense = load_members(&ctx.run, TRAIN, cfg.members.len())?;
    let data = train_set(cfg)?;
    let test = test_set(cfg)?;
    let out = StageDir::create(&ctx.run, PRUNE)?;
    let schedule = |(spec, net): (&ctmpc_core::ensemble::MemberSpec, &MemberNetwork)| {
        let ft = cfg.training.for_member(spec, cfg.pruning.fine_tune_epochs, spec.seed);
        net.prune_schedule(&data.samples, iterations, cfg.pruning.fraction, &ft)
    };
    let pairs: Vec<_> = cfg.members.iter().zip(&dense.members).collect();
    let rounds: Vec<Vec<MemberNetwork>> = if ctx.parallel {
        pairs.into_par_iter().map(schedule).collect::<Result<_, _>>()?
    } else {
        pairs.into_iter().map(schedule).collect::<Result<_, _>>()?
    };
    let mut memory = Vec::new();
    let mut mae = Vec::new();
    for it in 0..=iterations {
        let members: Vec<MemberNetwork> = if it == 0 {
            dense.members.clone()
        } else {
            rounds.iter().map(|r| r[it - 1].clone()).collect()
        };
        for (i, m) in members.iter().enumerate() {
            let r = m.memory_report();
            memory.push(MemoryRow {
                iteration: it,
                member: i,
                total_weights: r.total_weights,
                unpruned_weights: r.unpruned_weights,
                dense_bytes: r.dense_bytes,
                sparse_bytes: r.sparse_bytes,
            });
            let single = Ensemble::new(vec![m.clone()])?;
            mae.push(MaeRow {
                iteration: it,
                member: Some(i),
                mae: single.mae(&test.samples)?,
            });
        }
        mae.push(MaeRow {
            iteration: it,
            member: None,
            mae: Ensemble::new(members)?.mae(&test.samples)?,
        });
    }
    let last: Vec<&MemberNetwork> = match iterations {
        0 => dense.members.iter().collect(),
        n => rounds.iter().map(|r| &r[n - 1]).collect(),
    };
    for (i, m) in last.into_iter().enumerate() {
        m.save(&out.path(&member_file(i)))?;
    }
    write_csv(&out.path("memory.csv"), &memory)?;
    write_csv(&out.path("mae.csv"), &mae)?;
    out.commit()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub alpha: f64,
    /// Rank of the quantile among the sorted scores; `n + 1` means infinite.
    pub rank: usize,
    /// Empty when the quantile is infinite.
    pub quantile: Option<f64>,
    pub test_coverage: f64,
    /// `1 - alpha - 3 SE` for the test size.
    pub coverage_floor: f64,
}

fn scored(ensemble: &Ensemble, data: &Dataset) -> CliResult<Vec<ScoredPoint>> {
    data.samples
        .iter()
        .map(|s| {
            let e = ensemble.predict(&s.features)?;
            Ok(ScoredPoint::new(e.mu, e.sigma(), s.d))
        })
        .collect()
}

pub fn calibrate(ctx: &Ctx) -> CliResult<PathBuf> {
    let cfg = &ctx.cfg;
    let ensemble = deployed_members(&ctx.run, cfg)?;
    let cal_points = scored(&ensemble, &calibration_set(cfg)?)?;
    let test_points = scored(&ensemble, &test_set(cfg)?)?;
    let out = StageDir::create(&ctx.run, CALIBRATE)?;
    let cal = fit_calibrator(&cal_points)?;
    cal.save(&out.path("calibrator.json"))?;
    let n = test_points.len() as f64;
    let rows: Vec<CalibrationRow> = dataset_coverage(&test_points, &cal, &cfg.calibration.alphas)?
        .into_iter()
        .map(|(alpha, cov)| CalibrationRow {
            alpha,
            rank: cal.rank(alpha),
            quantile: cal.quantile(alpha).finite(),
            test_coverage: cov,
            coverage_floor: 1.0 - alpha - 3.0 * (alpha * (1.0 - alpha) / n).sqrt(),
        })
        .collect();
    write_csv(&out.path("coverage.csv"), &rows)?;
    out.commit()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub seed: u64,
    pub steps: usize,
    pub violation_fraction: f64,
    pub post_transient_violation_fraction: f64,
    pub min_headway: f64,
    pub contingency_steps: usize,
    pub collided: bool,
    /// Empty when no step planned nominally.
    pub median_alpha_hat: Option<f64>,
    /// `|v - v_lead|` at the last step.
    pub final_speed_gap: f64,
}

pub fn summarize(episode: usize, seed: u64, log: &EpisodeLog, transient: f64) -> CliResult<EpisodeSummary> {
    let s = safety_metrics(log, transient)?;
    let last = log.records.last().expect("nonempty episode");
    Ok(EpisodeSummary {
        episode,
        seed,
        steps: log.records.len(),
        violation_fraction: s.violation_fraction,
        post_transient_violation_fraction: s.post_transient_violation_fraction,
        min_headway: s.min_headway,
        contingency_steps: s.contingency_steps,
        collided: s.collided,
        median_alpha_hat: median_alpha_hat(log),
        final_speed_gap: (last.v - last.v_lead).abs(),
    })
}

/// Condition applied to every episode of a batch.
#[derive(Debug, Clone, Default)]
pub struct Perturbation {
    pub attack: Option<AttackConfig>,
    pub ood: Option<ctmpc_core::scenario::OodConfig>,
}

pub fn run_episodes(
    ctx: &Ctx,
    ensemble: &Ensemble,
    cal: &ConformalCalibrator,
    p: &Perturbation,
) -> CliResult<Vec<EpisodeLog>> {
    let one = |i: usize| {
        let mut ec = ctx.cfg.episode(i, p.attack.clone());
        if let Some(ood) = &p.ood {
            ec.ood = ood.clone();
        }
        run_episode(&ec, ensemble, cal)
    };
    let n = ctx.episode_count();
    let logs = if ctx.parallel {
        (0..n).into_par_iter().map(one).collect::<Result<Vec<_>, _>>()?
    } else {
        (0..n).map(one).collect::<Result<Vec<_>, _>>()?
    };
    Ok(logs)
}

pub fn episode_file(i: usize) -> String {
    format!("episode_{i:03}.csv")
}

#[derive(Serialize)]
struct HeadwayPlot {
    episode: usize,
    t: f64,
    d: f64,
    mu: f64,
    lower: Option<f64>,
    upper: Option<f64>,
    d_s: f64,
}

#[derive(Serialize)]
struct SpeedPlot {
    episode: usize,
    t: f64,
    v: f64,
    v_lead: f64,
    v_s: f64,
    accel: f64,
}

#[derive(Serialize)]
struct BoundPlot {
    episode: usize,
    t: f64,
    mode: Mode,
    q_hat: Option<f64>,
    alpha_hat: f64,
    safety_bound: f64,
}

pub fn simulate(ctx: &Ctx) -> CliResult<PathBuf> {
    let cfg = &ctx.cfg;
    let ensemble = deployed_members(&ctx.run, cfg)?;
    let cal = load_calibrator(&ctx.run)?;
    let logs = run_episodes(ctx, &ensemble, &cal, &Perturbation::default())?;
    let out = StageDir::create(&ctx.run, SIMULATE)?;
    let mut summaries = Vec::new();
    let (mut headway, mut speed, mut bound) = (Vec::new(), Vec::new(), Vec::new());
    for (i, log) in logs.iter().enumerate() {
        log.save(&out.path(&episode_file(i)))?;
        summaries.push(summarize(i, cfg.episode(i, None).seed, log, cfg.episode.transient)?);
        for r in &log.records {
            let iv = r.q_hat.map(|q| interval(r.mu, r.sigma, Quantile::Finite(q)));
            headway.push(HeadwayPlot {
                episode: i,
                t: r.t,
                d: r.d,
                mu: r.mu,
                lower: iv.map(|iv| iv.lo),
                upper: iv.map(|iv| iv.hi),
                d_s: cfg.mpc.d_s,
            });
            speed.push(SpeedPlot {
                episode: i,
                t: r.t,
                v: r.v,
                v_lead: r.v_lead,
                v_s: cfg.mpc.v_s,
                accel: r.accel,
            });
            bound.push(BoundPlot {
                episode: i,
                t: r.t,
                mode: r.mode,
                q_hat: r.q_hat,
                alpha_hat: r.alpha_hat,
                safety_bound: r.safety_bound,
            });
        }
    }
    write_csv(&out.path("summary.csv"), &summaries)?;
    write_json(&out.path("coverage.json"), &coverage_metrics(&logs, &cal, &cfg.calibration.alphas)?)?;
    write_csv(&out.path("plot_headway.csv"), &headway)?;
    write_csv(&out.path("plot_speed.csv"), &speed)?;
    write_csv(&out.path("plot_bound.csv"), &bound)?;
    out.commit()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    /// `attack`, or `ood` for the shifted-perception batch.
    pub condition: String,
    pub epsilon: f64,
    pub steps: usize,
    /// Median length needed for `1 - alpha` coverage of these steps.
    pub needed_median_length: Option<f64>,
    /// Median length at the calibrated quantile.
    pub calibrated_median_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub alpha: f64,
    /// Spearman correlation of epsilon and needed median length.
    pub spearman: Option<f64>,
    /// One-sided rank-test p-value of OOD lengths exceeding clean ones.
    pub ood_p_value: f64,
    pub ood_median_length: Option<f64>,
    pub clean_median_length: Option<f64>,
}

/// Attack sweep over the configured epsilon grid plus one OOD batch.
pub fn attack_sweep(ctx: &Ctx) -> CliResult<PathBuf> {
    let cfg = &ctx.cfg;
    let sweep = &cfg.attack;
    let ensemble = deployed_members(&ctx.run, cfg)?;
    let cal = load_calibrator(&ctx.run)?;
    let q = cal.quantile(sweep.alpha);
    let mut rows = Vec::new();
    let mut clean: Option<Vec<EpisodeLog>> = None;
    for &eps in &sweep.epsilons {
        let p = Perturbation {
            attack: Some(AttackConfig {
                epsilon: eps,
                targets: sweep.targets.clone(),
            }),
            ood: None,
        };
        let logs = run_episodes(ctx, &ensemble, &cal, &p)?;
        rows.push(interval_row("attack", eps, &logs, q, sweep.alpha)?);
        if eps == 0.0 && clean.is_none() {
            clean = Some(logs);
        }
    }
    let clean = match clean {
        Some(l) => l,
        None => run_episodes(ctx, &ensemble, &cal, &Perturbation::default())?,
    };
    let ood_logs = run_episodes(
        ctx,
        &ensemble,
        &cal,
        &Perturbation {
            attack: None,
            ood: Some(sweep.ood.clone()),
        },
    )?;
    rows.push(interval_row("ood", 0.0, &ood_logs, q, sweep.alpha)?);
    let lengths = |logs: &[EpisodeLog]| interval_lengths(logs, q).unwrap_or_default();
    let (mut l_clean, mut l_ood) = (lengths(&clean), lengths(&ood_logs));
    let ood_p_value = if l_clean.is_empty() || l_ood.is_empty() {
        1.0
    } else {
        mann_whitney_greater(&l_ood, &l_clean)?
    };
    let attack_rows: Vec<&IntervalRow> = rows.iter().filter(|r| r.condition == "attack").collect();
    let needed: Option<Vec<f64>> = attack_rows.iter().map(|r| r.needed_median_length).collect();
    let eps: Vec<f64> = attack_rows.iter().map(|r| r.epsilon).collect();
    let trend = Trend {
        alpha: sweep.alpha,
        spearman: needed.and_then(|n| spearman(&eps, &n).ok()),
        ood_p_value,
        ood_median_length: median(&mut l_ood),
        clean_median_length: median(&mut l_clean),
    };
    let out = StageDir::create(&ctx.run, ATTACK)?;
    write_csv(&out.path("intervals.csv"), &rows)?;
    write_json(&out.path("trend.json"), &trend)?;
    out.commit()
}

fn interval_row(condition: &str, epsilon: f64, logs: &[EpisodeLog], q: Quantile, alpha: f64) -> CliResult<IntervalRow> {
    Ok(IntervalRow {
        condition: condition.into(),
        epsilon,
        steps: logs.iter().map(|l| l.records.len()).sum(),
        needed_median_length: needed_interval_length(logs, alpha)?,
        calibrated_median_length: interval_lengths(logs, q).and_then(|mut v| median(&mut v)),
    })
}

/// Fail with an input error unless `run` holds at least one stage.
pub fn require_artifacts(run: &Path) -> CliResult<()> {
    let any = [TRAIN, PRUNE, CALIBRATE, SIMULATE, ATTACK].iter().any(|s| run.join(s).is_dir());
    if any {
        Ok(())
    } else {
        Err(CliError::Input(format!("{} holds no run artifacts", run.display())))
    }
}
