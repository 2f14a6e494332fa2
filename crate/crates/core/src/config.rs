//! Run configuration: one TOML file drives every pipeline stage.
//!
//! Every seed is explicit. Data splits draw from independent streams of the
//! top-level `seed`, members carry their own seeds, and episode `i` uses
//! `episode.seed + i`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::MpcConfig;
use crate::ensemble::{LrSchedule, MemberSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::scenario::{generate_dataset, sample_headways, split_rng, AttackConfig, Dataset, LeadProfile, OodConfig, SensorModel, Split};
use crate::simloop::EpisodeConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Root of the train, calibration and test data streams.
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub sensor: SensorModel,
    pub members: Vec<MemberSpec>,
    pub training: TrainingConfig,
    #[serde(default)]
    pub pruning: PruningConfig,
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub mpc: MpcConfig,
    pub episode: EpisodeSettings,
    #[serde(default)]
    pub attack: AttackSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
    /// Headways are drawn uniformly from `[headway_min, headway_max)`.
    pub headway_min: f64,
    pub headway_max: f64,
    /// Use a saved dataset instead of generating the training split.
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
}

/// Optimizer settings shared by all members; batch size and seed are per member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    #[serde(default = "default_grad_norm")]
    pub max_grad_norm: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

fn default_grad_norm() -> f64 {
    TrainConfig::default().max_grad_norm
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            epochs: t.epochs,
            max_grad_norm: t.max_grad_norm,
            schedule: t.schedule,
        }
    }
}

impl TrainingConfig {
    pub fn for_member(&self, spec: &MemberSpec, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: spec.batch_size,
            epochs,
            seed,
            max_grad_norm: self.max_grad_norm,
            schedule: self.schedule,
        }
    }

    pub fn base(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.epochs,
            max_grad_norm: self.max_grad_norm,
            schedule: self.schedule,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningConfig {
    pub iterations: usize,
    pub fraction: f64,
    pub fine_tune_epochs: usize,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            iterations: 6,
            fraction: 0.5,
            fine_tune_epochs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub size: usize,
    /// Miscoverage rates checked on the test split.
    pub alphas: Vec<f64>,
    /// Calibrate the pruned members instead of the dense ones.
    #[serde(default)]
    pub use_pruned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSettings {
    pub count: usize,
    pub seed: u64,
    pub duration: f64,
    pub dt_sim: f64,
    pub initial_headway: f64,
    pub initial_speed: f64,
    pub lead: LeadProfile,
    #[serde(default)]
    pub ood: OodConfig,
    /// Steps before this time are excluded from post-transient metrics (s).
    #[serde(default)]
    pub transient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSweep {
    pub epsilons: Vec<f64>,
    /// Attacked member indices; empty attacks all members.
    #[serde(default)]
    pub targets: Vec<usize>,
    /// Miscoverage rate whose interval length the sweep tabulates.
    pub alpha: f64,
    /// Perception shift compared against in-distribution runs.
    #[serde(default = "default_ood")]
    pub ood: OodConfig,
}

fn default_ood() -> OodConfig {
    OodConfig::heavy_noise(4.0)
}

impl Default for AttackSweep {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 0.01, 0.02, 0.04],
            targets: Vec::new(),
            alpha: 0.1,
            ood: default_ood(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        let d = &self.data;
        if d.train_size == 0 || d.test_size == 0 {
            return Err(Error::invalid("train_size and test_size must be >= 1"));
        }
        if !(d.headway_min.is_finite() && d.headway_max.is_finite() && 0.0 <= d.headway_min && d.headway_min < d.headway_max) {
            return Err(Error::invalid("headway range must satisfy 0 <= min < max"));
        }
        self.sensor.validate()?;
        if self.members.is_empty() {
            return Err(Error::invalid("at least one member is required"));
        }
        for (i, m) in self.members.iter().enumerate() {
            if m.batch_size == 0 || m.hidden.contains(&0) {
                return Err(Error::invalid(format!("member {i}: batch size and widths must be >= 1")));
            }
        }
        let t = &self.training;
        self.training.for_member(&self.members[0], t.epochs, 0).validate()?;
        let p = &self.pruning;
        if !(p.fraction > 0.0 && p.fraction < 1.0) {
            return Err(Error::invalid("pruning fraction must lie in (0, 1)"));
        }
        if self.calibration.size == 0 {
            return Err(Error::invalid("calibration size must be >= 1"));
        }
        if self.calibration.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::invalid("calibration alphas must lie in (0, 1)"));
        }
        self.mpc.validate()?;
        if self.episode.count == 0 {
            return Err(Error::invalid("episode count must be >= 1"));
        }
        if !(self.episode.transient.is_finite() && self.episode.transient >= 0.0) {
            return Err(Error::invalid("transient must be finite and >= 0"));
        }
        self.episode(0, None).validate()?;
        let a = &self.attack;
        if a.epsilons.is_empty() {
            return Err(Error::invalid("attack sweep needs at least one epsilon"));
        }
        for &eps in &a.epsilons {
            AttackConfig { epsilon: eps, targets: a.targets.clone() }.validate(self.members.len())?;
        }
        a.ood.validate()?;
        if !(a.alpha > 0.0 && a.alpha < 1.0) {
            return Err(Error::invalid("attack alpha must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Settings of episode `index`, optionally under attack.
    pub fn episode(&self, index: usize, attack: Option<AttackConfig>) -> EpisodeConfig {
        let e = &self.episode;
        EpisodeConfig {
            duration: e.duration,
            dt_sim: e.dt_sim,
            initial_headway: e.initial_headway,
            initial_speed: e.initial_speed,
            lead: e.lead.clone(),
            sensor: self.sensor.clone(),
            ood: e.ood.clone(),
            attack,
            mpc: self.mpc.clone(),
            seed: e.seed.wrapping_add(index as u64),
        }
    }

    /// Generate the in-distribution `split` from its own stream of `seed`.
    /// Sizes come from the data and calibration sections; other splits are
    /// rejected.
    pub fn generate(&self, split: Split) -> Result<Dataset> {
        let n = match split {
            Split::Train => self.data.train_size,
            Split::Test => self.data.test_size,
            Split::Calibration => self.calibration.size,
            other => return Err(Error::invalid(format!("{other:?} is not a dataset split"))),
        };
        self.generate_n(split, n)
    }

    /// Like `generate` with an explicit size.
    pub fn generate_n(&self, split: Split, n: usize) -> Result<Dataset> {
        let mut rng = split_rng(self.seed, split);
        let d = sample_headways(n, self.data.headway_min, self.data.headway_max, &mut rng);
        generate_dataset(&d, &self.sensor, &OodConfig::in_distribution(), self.seed, &mut rng)
    }

    /// Replace every seed derived from the top level with ones rooted at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.episode.seed = seed;
        self
    }
}
