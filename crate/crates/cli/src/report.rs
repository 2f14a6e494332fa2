//! Consolidated run report. Rebuilt from the artifacts on every call, so a
//! rerun over unchanged artifacts produces the same bytes.

use std::path::{Path, PathBuf};

use serde::Serialize;

use ctmpc_core::simloop::EpisodeLog;

use crate::error::{CliError, CliResult};
use crate::run::*;
use crate::stages::{CalibrationRow, EpisodeSummary, IntervalRow, LossRow, MaeRow, MemoryRow, Trend};

#[derive(Debug, Serialize)]
pub struct Report {
    pub train: Option<TrainSection>,
    pub prune: Option<PruneSection>,
    pub calibrate: Option<Vec<CalibrationRow>>,
    pub simulate: Option<SimulateSection>,
    pub attack_sweep: Option<AttackSection>,
}

#[derive(Debug, Serialize)]
pub struct MemberLoss {
    pub member: usize,
    pub epochs: usize,
    pub final_loss: f64,
}

#[derive(Debug, Serialize)]
pub struct TrainSection {
    pub members: Vec<MemberLoss>,
}

#[derive(Debug, Serialize)]
pub struct PruneSection {
    pub memory: Vec<MemoryRow>,
    pub mae: Vec<MaeRow>,
    /// Ensemble MAE after the last iteration minus before pruning.
    pub ensemble_mae_change: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EpisodeEntry {
    pub file: String,
    pub summary: EpisodeSummary,
}

#[derive(Debug, Serialize)]
pub struct Pooled {
    pub episodes: usize,
    pub steps: usize,
    pub violation_fraction: f64,
    pub mean_post_transient_violation_fraction: f64,
    pub min_headway: f64,
    pub contingency_steps: usize,
    pub collisions: usize,
    pub max_final_speed_gap: f64,
}

#[derive(Debug, Serialize)]
pub struct SimulateSection {
    pub episodes: Vec<EpisodeEntry>,
    pub pooled: Pooled,
}

#[derive(Debug, Serialize)]
pub struct AttackSection {
    pub intervals: Vec<IntervalRow>,
    pub trend: Trend,
}

fn present(run: &Path, stage: &str) -> Option<PathBuf> {
    let dir = run.join(stage);
    dir.is_dir().then_some(dir)
}

fn required(dir: &Path, file: &str) -> CliResult<PathBuf> {
    let path = dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Integrity(format!("{} is missing", path.display())))
    }
}

fn train_section(dir: &Path) -> CliResult<TrainSection> {
    let rows: Vec<LossRow> = read_csv(&required(dir, "loss.csv")?)?;
    let mut members: Vec<MemberLoss> = Vec::new();
    for r in rows {
        match members.last_mut() {
            Some(m) if m.member == r.member => {
                m.epochs += 1;
                m.final_loss = r.loss;
            }
            _ => members.push(MemberLoss {
                member: r.member,
                epochs: 1,
                final_loss: r.loss,
            }),
        }
    }
    Ok(TrainSection { members })
}

fn prune_section(dir: &Path) -> CliResult<PruneSection> {
    let memory: Vec<MemoryRow> = read_csv(&required(dir, "memory.csv")?)?;
    let mae: Vec<MaeRow> = read_csv(&required(dir, "mae.csv")?)?;
    let fused: Vec<&MaeRow> = mae.iter().filter(|r| r.member.is_none()).collect();
    let change = match (fused.first(), fused.last()) {
        (Some(a), Some(b)) => Some(b.mae - a.mae),
        _ => None,
    };
    Ok(PruneSection {
        memory,
        mae,
        ensemble_mae_change: change,
    })
}

fn simulate_section(dir: &Path) -> CliResult<SimulateSection> {
    let summaries: Vec<EpisodeSummary> = read_csv(&required(dir, "summary.csv")?)?;
    let mut episodes = Vec::with_capacity(summaries.len());
    let mut logs = Vec::with_capacity(summaries.len());
    for s in summaries {
        let file = crate::stages::episode_file(s.episode);
        let log = EpisodeLog::load(&required(dir, &file)?)?;
        if log.records.len() != s.steps {
            return Err(CliError::Integrity(format!(
                "{}: {} rows but summary.csv lists {}",
                dir.join(&file).display(),
                log.records.len(),
                s.steps
            )));
        }
        logs.push(log);
        episodes.push(EpisodeEntry { file, summary: s });
    }
    if episodes.is_empty() {
        return Err(CliError::Integrity(format!("{} lists no episodes", dir.join("summary.csv").display())));
    }
    let records = logs.iter().flat_map(|l| &l.records);
    let steps = records.clone().count();
    let n = episodes.len() as f64;
    let pooled = Pooled {
        episodes: episodes.len(),
        steps,
        violation_fraction: records.clone().filter(|r| !r.safe).count() as f64 / steps as f64,
        mean_post_transient_violation_fraction: episodes
            .iter()
            .map(|e| e.summary.post_transient_violation_fraction)
            .sum::<f64>()
            / n,
        min_headway: records.clone().map(|r| r.d).fold(f64::INFINITY, f64::min),
        contingency_steps: episodes.iter().map(|e| e.summary.contingency_steps).sum(),
        collisions: episodes.iter().filter(|e| e.summary.collided).count(),
        max_final_speed_gap: episodes.iter().map(|e| e.summary.final_speed_gap).fold(0.0, f64::max),
    };
    Ok(SimulateSection { episodes, pooled })
}

fn attack_section(dir: &Path) -> CliResult<AttackSection> {
    let intervals: Vec<IntervalRow> = read_csv(&required(dir, "intervals.csv")?)?;
    let path = required(dir, "trend.json")?;
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let trend: Trend = serde_json::from_str(&text).map_err(|e| {
        CliError::Integrity(format!("{}: line {}: {e}", path.display(), e.line()))
    })?;
    Ok(AttackSection { intervals, trend })
}

pub fn build(run: &Path) -> CliResult<Report> {
    crate::stages::require_artifacts(run)?;
    Ok(Report {
        train: present(run, TRAIN).map(|d| train_section(&d)).transpose()?,
        prune: present(run, PRUNE).map(|d| prune_section(&d)).transpose()?,
        calibrate: present(run, CALIBRATE)
            .map(|d| required(&d, "coverage.csv").and_then(|p| read_csv(&p)))
            .transpose()?,
        simulate: present(run, SIMULATE).map(|d| simulate_section(&d)).transpose()?,
        attack_sweep: present(run, ATTACK).map(|d| attack_section(&d)).transpose()?,
    })
}

/// Build the report and write `report/report.json`, replacing any previous one.
pub fn report(run: &Path) -> CliResult<PathBuf> {
    if !run.is_dir() {
        return Err(CliError::Input(format!("{} is not a directory", run.display())));
    }
    let report = build(run)?;
    let out = StageDir::replace(run, REPORT)?;
    write_json(&out.path("report.json"), &report)?;
    out.commit()
}
