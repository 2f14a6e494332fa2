//! Synthetic perception world: headway to feature vectors, distribution
//! shift, gradient-sign attacks, lead-vehicle speed schedules and datasets.
//!
//! The noise-free encoding of a headway `d` is eight smooth functions of `d`
//! at different scales:
//!
//! ```text
//!     d/25, tanh(d/10), tanh(d/30), ln(1 + d/5),
//!     exp(-d/15), sqrt(d/25 + 0.04), sin(pi d/120), (d/25)^2 / 4
//! ```
//!
//! The first coordinate alone is injective. Each coordinate receives i.i.d.
//! Gaussian noise with standard deviation `noise_scale * m(d)`, where
//! `m(d) = 1` below `d_far` and `m(d) = far_gain * d / d_far` beyond it.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{MemberNetwork, Sample};
use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 8;

/// The noise-free encoding.
pub fn encode(d: f64) -> [f64; FEATURE_DIM] {
    let u = d / 25.0;
    [
        u,
        (d / 10.0).tanh(),
        (d / 30.0).tanh(),
        (1.0 + d / 5.0).ln(),
        (-d / 15.0).exp(),
        (u + 0.04).sqrt(),
        (std::f64::consts::PI * d / 120.0).sin(),
        u * u / 4.0,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    /// Per-feature noise standard deviation at short range.
    pub noise_scale: f64,
    /// Headway beyond which the noise grows (m).
    pub d_far: f64,
    /// Noise multiplier at `d_far`, growing linearly in `d` beyond it.
    pub far_gain: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            noise_scale: 0.01,
            d_far: 20.0,
            far_gain: 2.0,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return Err(Error::invalid("sensor noise scale must be positive"));
        }
        if !(self.d_far.is_finite() && self.d_far > 0.0) {
            return Err(Error::invalid("d_far must be positive"));
        }
        if !(self.far_gain.is_finite() && self.far_gain >= 1.0) {
            return Err(Error::invalid("far_gain must be >= 1"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    /// Per-feature noise standard deviation at headway `d`.
    pub fn noise_std(&self, d: f64) -> f64 {
        let m = if d < self.d_far {
            1.0
        } else {
            self.far_gain * d / self.d_far
        };
        self.noise_scale * m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodLabel {
    InDistribution,
    HeavyNoise,
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    pub label: OodLabel,
    /// Multiplier on the sensor noise, `>= 1`.
    pub inflation: f64,
    /// Added to every rendered feature vector; empty means no bias.
    #[serde(default)]
    pub bias: Vec<f64>,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self::in_distribution()
    }
}

impl OodConfig {
    pub fn in_distribution() -> Self {
        Self {
            label: OodLabel::InDistribution,
            inflation: 1.0,
            bias: Vec::new(),
        }
    }

    pub fn heavy_noise(inflation: f64) -> Self {
        Self {
            label: OodLabel::HeavyNoise,
            inflation,
            bias: Vec::new(),
        }
    }

    pub fn shifted(bias: Vec<f64>) -> Self {
        Self {
            label: OodLabel::Shifted,
            inflation: 1.0,
            bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inflation.is_finite() && self.inflation >= 1.0) {
            return Err(Error::invalid("OOD inflation must be >= 1"));
        }
        if !self.bias.is_empty() && self.bias.len() != FEATURE_DIM {
            return Err(Error::invalid(format!("OOD bias must have {FEATURE_DIM} entries")));
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("OOD bias must be finite"));
        }
        Ok(())
    }
}

/// Render the feature vector for headway `d`.
pub fn render(d: f64, sensor: &SensorModel, rng: &mut impl Rng) -> Vec<f64> {
    render_ood(d, sensor, &OodConfig::in_distribution(), rng)
}

/// Render under a distribution shift.
pub fn render_ood(d: f64, sensor: &SensorModel, ood: &OodConfig, rng: &mut impl Rng) -> Vec<f64> {
    let std = sensor.noise_std(d) * ood.inflation;
    let mut f: Vec<f64> = encode(d)
        .iter()
        .map(|x| x + std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for (x, b) in f.iter_mut().zip(&ood.bias) {
        *x += b;
    }
    f
}

/// Independent generator for a named data split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Calibration,
    Test,
    Episode,
    Attack,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Calibration => 2,
            Split::Test => 3,
            Split::Episode => 4,
            Split::Attack => 5,
        }
    }
}

/// A generator whose stream depends on both `seed` and `split`.
pub fn split_rng(seed: u64, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    rng
}

/// `n` headways drawn uniformly from `[lo, hi)`.
pub fn sample_headways(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sensor: SensorModel,
    pub ood: OodConfig,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

/// Render one sample per entry of `headways`.
pub fn generate_dataset(
    headways: &[f64],
    sensor: &SensorModel,
    ood: &OodConfig,
    seed: u64,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    sensor.validate()?;
    ood.validate()?;
    if headways.is_empty() {
        return Err(Error::invalid("headway trajectory must be nonempty"));
    }
    if let Some(d) = headways.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::invalid(format!("headway must be finite and >= 0, got {d}")));
    }
    let samples = headways
        .iter()
        .map(|&d| Sample {
            features: render_ood(d, sensor, ood, rng),
            d,
        })
        .collect();
    Ok(Dataset {
        sensor: sensor.clone(),
        ood: ood.clone(),
        seed,
        samples,
    })
}

const DATASET_MAGIC: &str = "# ctmpc-dataset v1";

impl Dataset {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::format(format!("dataset write: {e}"));
        writeln!(w, "{DATASET_MAGIC}").map_err(io)?;
        writeln!(w, "# sensor={}", serde_json::to_string(&self.sensor).unwrap()).map_err(io)?;
        writeln!(w, "# ood={}", serde_json::to_string(&self.ood).unwrap()).map_err(io)?;
        writeln!(w, "# seed={}", self.seed).map_err(io)?;
        let header: Vec<String> = (0..FEATURE_DIM)
            .map(|i| format!("f{i}"))
            .chain(["d".to_string()])
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for s in &self.samples {
            let row: Vec<String> = s
                .features
                .iter()
                .chain([&s.d])
                .map(|v| format!("{v:?}"))
                .collect();
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut header = Vec::new();
        for _ in 0..4 {
            let mut line = String::new();
            reader
                .read_line(&mut line)
                .map_err(|e| Error::format(format!("dataset header: {e}")))?;
            header.push(line.trim_end().to_string());
        }
        if header[0] != DATASET_MAGIC {
            return Err(Error::format("not a ctmpc dataset (bad magic line)"));
        }
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(&format!("# {key}="))
                .map(str::to_string)
                .ok_or_else(|| Error::format(format!("dataset header missing `{key}`")))
        };
        let sensor: SensorModel = serde_json::from_str(&field(&header[1], "sensor")?)
            .map_err(|e| Error::format(format!("dataset sensor: {e}")))?;
        let ood: OodConfig = serde_json::from_str(&field(&header[2], "ood")?)
            .map_err(|e| Error::format(format!("dataset ood: {e}")))?;
        let seed: u64 = field(&header[3], "seed")?
            .parse()
            .map_err(|e| Error::format(format!("dataset seed: {e}")))?;
        sensor.validate().map_err(|e| Error::format(e.to_string()))?;
        ood.validate().map_err(|e| Error::format(e.to_string()))?;

        let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let cols = csv
            .headers()
            .map_err(|e| Error::format(format!("dataset columns: {e}")))?
            .len();
        if cols != FEATURE_DIM + 1 {
            return Err(Error::format(format!("dataset has {cols} columns, expected {}", FEATURE_DIM + 1)));
        }
        let mut samples = Vec::new();
        for (i, rec) in csv.records().enumerate() {
            let line = i + 6;
            let rec = rec.map_err(|e| Error::format(format!("dataset line {line}: {e}")))?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(format!("dataset line {line}: {e}")))?;
            if vals.len() != FEATURE_DIM + 1 || vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(format!("dataset line {line}: malformed row")));
            }
            let d = vals[FEATURE_DIM];
            if d < 0.0 {
                return Err(Error::format(format!("dataset line {line}: negative headway")));
            }
            samples.push(Sample {
                features: vals[..FEATURE_DIM].to_vec(),
                d,
            });
        }
        if samples.is_empty() {
            return Err(Error::format("dataset has no rows"));
        }
        Ok(Self {
            sensor,
            ood,
            seed,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(f).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    /// Shuffle the sample order with `rng`.
    pub fn shuffle(&mut self, rng: &mut impl Rng) {
        self.samples.shuffle(rng);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Indices of attacked members; empty attacks all of them.
    #[serde(default)]
    pub targets: Vec<usize>,
}

impl AttackConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            targets: Vec::new(),
        }
    }

    pub fn validate(&self, members: usize) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::invalid("attack epsilon must be finite and >= 0"));
        }
        if self.targets.iter().any(|&t| t >= members) {
            return Err(Error::invalid("attack target index out of range"));
        }
        Ok(())
    }
}

/// Move `features` by `epsilon * sign(grad)`, where `grad` is the gradient of
/// the mean NLL of the targeted members at `d_true`.
pub fn fgsm_perturb(
    features: &[f64],
    members: &[MemberNetwork],
    d_true: f64,
    atk: &AttackConfig,
) -> Result<Vec<f64>> {
    atk.validate(members.len())?;
    if members.is_empty() {
        return Err(Error::invalid("attack needs at least one member"));
    }
    if atk.epsilon == 0.0 {
        for m in members {
            if m.input_dim() != features.len() {
                return Err(Error::invalid("feature dimension mismatch"));
            }
        }
        return Ok(features.to_vec());
    }
    let targets: Vec<&MemberNetwork> = if atk.targets.is_empty() {
        members.iter().collect()
    } else {
        atk.targets.iter().map(|&i| &members[i]).collect()
    };
    let mut grad = vec![0.0; features.len()];
    for m in &targets {
        for (g, gi) in grad.iter_mut().zip(m.input_gradient(features, d_true)?) {
            *g += gi / targets.len() as f64;
        }
    }
    Ok(features
        .iter()
        .zip(&grad)
        .map(|(x, g)| {
            let s = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            x + atk.epsilon * s
        })
        .collect())
}

/// Lead-vehicle speed schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LeadProfile {
    Constant { speed: f64 },
    /// `from` before `at`, `to` from `at` on.
    Step { from: f64, to: f64, at: f64 },
    /// `from` until `start`, then changing at `rate` (m/s^2), floored at 0.
    Ramp { from: f64, rate: f64, start: f64 },
    /// Linear interpolation through `(time, speed)` knots, held flat outside.
    Piecewise { knots: Vec<(f64, f64)> },
}

impl LeadProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LeadProfile::Constant { speed } => speed.is_finite() && *speed >= 0.0,
            LeadProfile::Step { from, to, at } => {
                [from, to, at].iter().all(|v| v.is_finite()) && *from >= 0.0 && *to >= 0.0
            }
            LeadProfile::Ramp { from, rate, start } => {
                [from, rate, start].iter().all(|v| v.is_finite()) && *from >= 0.0
            }
            LeadProfile::Piecewise { knots } => {
                !knots.is_empty()
                    && knots.iter().all(|(t, v)| t.is_finite() && v.is_finite() && *v >= 0.0)
                    && knots.windows(2).all(|w| w[0].0 < w[1].0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid lead profile {self:?}")))
        }
    }

    pub fn speed(&self, t: f64) -> f64 {
        match self {
            LeadProfile::Constant { speed } => *speed,
            LeadProfile::Step { from, to, at } => {
                if t < *at {
                    *from
                } else {
                    *to
                }
            }
            LeadProfile::Ramp { from, rate, start } => (from + rate * (t - start).max(0.0)).max(0.0),
            LeadProfile::Piecewise { knots } => {
                let i = knots.partition_point(|(kt, _)| *kt <= t);
                if i == 0 {
                    knots[0].1
                } else if i == knots.len() {
                    knots[i - 1].1
                } else {
                    let (t0, v0) = knots[i - 1];
                    let (t1, v1) = knots[i];
                    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
                }
            }
        }
    }
}
