//! Run directories, stage output directories and data splits.

use std::fs;
use std::path::{Path, PathBuf};

use ctmpc_core::config::RunConfig;
use ctmpc_core::conformal::ConformalCalibrator;
use ctmpc_core::ensemble::{Ensemble, MemberNetwork};
use ctmpc_core::scenario::{Dataset, Split};

use crate::error::{CliError, CliResult};

pub const TRAIN: &str = "train";
pub const PRUNE: &str = "prune";
pub const CALIBRATE: &str = "calibrate";
pub const SIMULATE: &str = "simulate";
pub const ATTACK: &str = "attack-sweep";
pub const REPORT: &str = "report";

/// A stage's output directory under construction. Files go to a hidden
/// sibling that is renamed into place by `commit`; dropping without
/// committing removes it, so a failed stage leaves nothing behind.
pub struct StageDir {
    tmp: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl StageDir {
    /// Fails if the stage already ran in `run`.
    pub fn create(run: &Path, name: &str) -> CliResult<Self> {
        let dest = run.join(name);
        if dest.exists() {
            return Err(CliError::Input(format!(
                "{} already exists; outputs are never overwritten",
                dest.display()
            )));
        }
        Self::fresh(run, name, dest)
    }

    /// Like `create`, but `commit` replaces an existing directory.
    pub fn replace(run: &Path, name: &str) -> CliResult<Self> {
        Self::fresh(run, name, run.join(name))
    }

    fn fresh(run: &Path, name: &str, dest: PathBuf) -> CliResult<Self> {
        let tmp = run.join(format!(".{name}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
        Ok(Self {
            tmp,
            dest,
            committed: false,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.tmp.join(file)
    }

    pub fn commit(mut self) -> CliResult<PathBuf> {
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).map_err(|e| io_err(&self.dest, e))?;
        }
        fs::rename(&self.tmp, &self.dest).map_err(|e| io_err(&self.dest, e))?;
        self.committed = true;
        Ok(self.dest.clone())
    }
}

impl Drop for StageDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

/// Load and validate a config, applying a seed override. Any failure here is
/// an input error, including a malformed file.
pub fn load_config(path: &Path, seed_override: Option<u64>) -> CliResult<RunConfig> {
    let cfg = RunConfig::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(match seed_override {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn saved_or_generated(cfg: &RunConfig, path: Option<&PathBuf>, split: Split, n: usize) -> CliResult<Dataset> {
    match path {
        Some(p) if !p.exists() => Err(CliError::Input(format!("dataset {} does not exist", p.display()))),
        Some(p) => Ok(Dataset::load(p)?),
        None => Ok(cfg.generate_n(split, n)?),
    }
}

pub fn train_set(cfg: &RunConfig) -> CliResult<Dataset> {
    saved_or_generated(cfg, cfg.data.train_path.as_ref(), Split::Train, cfg.data.train_size)
}

pub fn test_set(cfg: &RunConfig) -> CliResult<Dataset> {
    saved_or_generated(cfg, cfg.data.test_path.as_ref(), Split::Test, cfg.data.test_size)
}

pub fn calibration_set(cfg: &RunConfig) -> CliResult<Dataset> {
    Ok(cfg.generate(Split::Calibration)?)
}

pub fn member_file(i: usize) -> String {
    format!("member_{i}.json")
}

fn require_dir(run: &Path, stage: &str) -> CliResult<PathBuf> {
    let dir = run.join(stage);
    if !dir.is_dir() {
        return Err(CliError::Input(format!(
            "{} is missing; run the {stage} stage first",
            dir.display()
        )));
    }
    Ok(dir)
}

/// Members written by `stage`, one checkpoint per configured member.
pub fn load_members(run: &Path, stage: &str, count: usize) -> CliResult<Ensemble> {
    let dir = require_dir(run, stage)?;
    let mut members = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(member_file(i));
        if !path.exists() {
            return Err(CliError::Input(format!("checkpoint {} is missing", path.display())));
        }
        members.push(MemberNetwork::load(&path)?);
    }
    Ok(Ensemble::new(members)?)
}

/// The members the calibrator was fitted to.
pub fn deployed_members(run: &Path, cfg: &RunConfig) -> CliResult<Ensemble> {
    let stage = if cfg.calibration.use_pruned { PRUNE } else { TRAIN };
    load_members(run, stage, cfg.members.len())
}

pub fn load_calibrator(run: &Path) -> CliResult<ConformalCalibrator> {
    let path = require_dir(run, CALIBRATE)?.join("calibrator.json");
    if !path.exists() {
        return Err(CliError::Input(format!("calibrator {} is missing", path.display())));
    }
    Ok(ConformalCalibrator::load(&path)?)
}

/// Write serializable rows as CSV with a header.
pub fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read CSV rows. Malformed rows are integrity errors naming file and line.
pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(i as u64 + 2, |p| p.line());
            CliError::Integrity(format!("{}: line {line}: {e}", path.display()))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}
