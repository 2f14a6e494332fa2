//! Mean-variance ReLU regressors, their Gaussian-mixture ensemble, and
//! iterative magnitude pruning.
//!
//! Each member maps a feature vector to two raw outputs `(m, s)`. The headway
//! estimate is `mu = t0 + t1 * m` and the variance is
//! `var = VAR_FLOOR + t1^2 * softplus(s)`, where `(t0, t1)` is the member's
//! target normalization (identity unless fitted). Members are trained on the
//! Gaussian negative log likelihood `log var + (d - mu)^2 / var` with
//! minibatch SGD, momentum, gradient-norm clipping and a cosine rate decay.
//!
//! Pruning ranks weights by magnitude within each weight matrix, with the
//! mean and variance rows of the output matrix ranked separately.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound added to every variance output.
pub const VAR_FLOOR: f64 = 1e-6;

/// Bytes per stored weight or bias value.
pub const VALUE_BYTES: usize = 4;
/// Bytes for the (row, col) location of one sparse entry: two 8-byte integers.
pub const INDEX_BYTES: usize = 16;

/// Initial raw variance output. softplus(-7) is about 1e-3, so fresh members
/// start with a variance a few tenths of a meter wide instead of near the
/// target scale, which the NLL would otherwise spend most epochs shrinking.
pub const VARIANCE_BIAS_INIT: f64 = -7.0;

const CHECKPOINT_FORMAT: &str = "ctmpc-member";
const CHECKPOINT_VERSION: u32 = 1;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output of a single member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberOutput {
    pub mu: f64,
    pub var: f64,
}

impl MemberOutput {
    pub fn sigma(&self) -> f64 {
        self.var.sqrt()
    }
}

/// `log var + (d - mu)^2 / var`.
pub fn nll_loss(output: MemberOutput, d_true: f64) -> f64 {
    debug_assert!(output.var > 0.0);
    output.var.ln() + (d_true - output.mu).powi(2) / output.var
}

/// Fully connected layer. `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// `true` where the weight has been pruned.
    pub pruned: Vec<bool>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            pruned: vec![false; inputs * outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (o, b) in self.bias.iter().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let dot: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum();
            out.push(dot + b);
        }
    }
}

/// Affine normalization of inputs and target, fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub target_mean: f64,
    pub target_scale: f64,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            feature_mean: vec![0.0; dim],
            feature_scale: vec![1.0; dim],
            target_mean: 0.0,
            target_scale: 1.0,
        }
    }

    /// Zero mean, unit variance statistics of `samples`. Degenerate spreads map to scale 1.
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("cannot fit normalizer on an empty dataset"))?;
        let dim = first.features.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        let mut t_mean = 0.0;
        for s in samples {
            if s.features.len() != dim {
                return Err(Error::invalid("inconsistent feature dimensions"));
            }
            for (m, f) in mean.iter_mut().zip(&s.features) {
                *m += f / n;
            }
            t_mean += s.d / n;
        }
        let mut var = vec![0.0; dim];
        let mut t_var = 0.0;
        for s in samples {
            for ((v, f), m) in var.iter_mut().zip(&s.features).zip(&mean) {
                *v += (f - m).powi(2) / n;
            }
            t_var += (s.d - t_mean).powi(2) / n;
        }
        let scale = |v: f64| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
        Ok(Self {
            feature_scale: var.into_iter().map(scale).collect(),
            feature_mean: mean,
            target_mean: t_mean,
            target_scale: scale(t_var),
        })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

/// A labelled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub d: f64,
}

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Minibatch gradients with a larger global L2 norm are rescaled to it; 0 disables.
    #[serde(default)]
    pub max_grad_norm: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

/// Learning-rate schedule over the steps of one `train` call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero. Damps the last-iterate
    /// oscillation that constant-rate SGD shows on the NLL.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Rate at training progress `t` in `[0, 1)`.
    pub fn rate(self, base: f64, t: f64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            epochs: 100,
            seed: 0,
            max_grad_norm: 1.0,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return Err(Error::invalid("max_grad_norm must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Per-parameter gradient, laid out like the member's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(net: &MemberNetwork) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.bias)
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Zero the entries of pruned weights.
    fn mask(&mut self, net: &MemberNetwork) {
        for (g, l) in self.weights.iter_mut().zip(&net.layers) {
            for (gv, p) in g.iter_mut().zip(&l.pruned) {
                if *p {
                    *gv = 0.0;
                }
            }
        }
    }

    fn scale(&mut self, k: f64) {
        for g in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }
}

fn prune_group(weights: &mut [f64], pruned: &mut [bool], fraction: f64) {
    let mut candidates: Vec<(f64, usize)> = weights
        .iter()
        .zip(pruned.iter())
        .enumerate()
        .filter(|(_, (_, p))| !**p)
        .map(|(k, (w, _))| (w.abs(), k))
        .collect();
    let count = (fraction * candidates.len() as f64).floor() as usize;
    // stable sort keeps index order among equal magnitudes
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    for &(_, k) in candidates.iter().take(count) {
        pruned[k] = true;
        weights[k] = 0.0;
    }
}

/// A mean-variance ReLU MLP with a prune mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberNetwork {
    layers: Vec<DenseLayer>,
    normalizer: Normalizer,
    seed: u64,
}

struct Trace {
    /// Input to each layer (normalized features first, then post-ReLU activations).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer, for the ReLU derivative.
    pre: Vec<Vec<f64>>,
    raw: [f64; 2],
}

impl MemberNetwork {
    /// He-initialized network with the given hidden widths.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input dimension must be >= 1"));
        }
        if hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("hidden widths must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for (i, &out) in hidden.iter().chain(std::iter::once(&2)).enumerate() {
            let last = i == hidden.len();
            let std = if last {
                (1.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut layer = DenseLayer::zeros(fan_in, out);
            layer.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
            if last {
                layer.bias[1] = VARIANCE_BIAS_INIT;
            }
            layers.push(layer);
            fan_in = out;
        }
        Ok(Self {
            layers,
            normalizer: Normalizer::identity(input_dim),
            seed,
        })
    }

    /// Build from explicit layers, validating shapes and masks.
    pub fn from_layers(layers: Vec<DenseLayer>, normalizer: Normalizer, seed: u64) -> Result<Self> {
        let net = Self {
            layers,
            normalizer,
            seed,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::invalid("network has no layers"))?;
        let mut expected_in = first.inputs;
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs != expected_in || l.inputs == 0 || l.outputs == 0 {
                return Err(Error::invalid(format!("layer {i} has inconsistent dimensions")));
            }
            let n = l.inputs * l.outputs;
            if l.weights.len() != n || l.pruned.len() != n || l.bias.len() != l.outputs {
                return Err(Error::invalid(format!("layer {i} has wrongly sized buffers")));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("layer {i} has non-finite parameters")));
            }
            if l.weights.iter().zip(&l.pruned).any(|(w, p)| *p && *w != 0.0) {
                return Err(Error::invalid(format!("layer {i} has a nonzero pruned weight")));
            }
            expected_in = l.outputs;
        }
        if expected_in != 2 {
            return Err(Error::invalid("output layer must have exactly 2 units"));
        }
        let nz = &self.normalizer;
        if nz.feature_mean.len() != first.inputs || nz.feature_scale.len() != first.inputs {
            return Err(Error::invalid("normalizer dimension does not match input"));
        }
        let ok = nz.feature_mean.iter().all(|v| v.is_finite())
            && nz.feature_scale.iter().all(|v| v.is_finite() && *v > 0.0)
            && nz.target_mean.is_finite()
            && nz.target_scale.is_finite()
            && nz.target_scale > 0.0;
        if !ok {
            return Err(Error::invalid("normalizer has invalid statistics"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn set_normalizer(&mut self, normalizer: Normalizer) -> Result<()> {
        let old = std::mem::replace(&mut self.normalizer, normalizer);
        if let Err(e) = self.validate() {
            self.normalizer = old;
            return Err(e);
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn unpruned_weights(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.pruned.iter().filter(|p| !**p).count())
            .sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layers.iter().map(|l| l.bias.len()).sum()
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "expected {} features, got {}",
                self.input_dim(),
                features.len()
            )));
        }
        Ok(())
    }

    fn trace(&self, features: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut x = self.normalizer.apply(features);
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&x, &mut z);
            inputs.push(std::mem::take(&mut x));
            if i < last {
                x = z.iter().map(|v| v.max(0.0)).collect();
                pre.push(z.clone());
            }
        }
        Trace {
            inputs,
            pre,
            raw: [z[0], z[1]],
        }
    }

    fn output_from_raw(&self, raw: [f64; 2]) -> MemberOutput {
        let t = &self.normalizer;
        MemberOutput {
            mu: t.target_mean + t.target_scale * raw[0],
            var: VAR_FLOOR + t.target_scale.powi(2) * softplus(raw[1]),
        }
    }

    /// Forward pass.
    pub fn forward(&self, features: &[f64]) -> Result<MemberOutput> {
        self.check_dim(features)?;
        Ok(self.output_from_raw(self.trace(features).raw))
    }

    /// dL/d(raw outputs) of the NLL at `d_true`.
    fn raw_grad(&self, raw: [f64; 2], d_true: f64) -> (MemberOutput, f64, [f64; 2]) {
        let out = self.output_from_raw(raw);
        let t = self.normalizer.target_scale;
        let resid = d_true - out.mu;
        let dl_dmu = -2.0 * resid / out.var;
        let dl_dvar = 1.0 / out.var - resid * resid / (out.var * out.var);
        let g = [dl_dmu * t, dl_dvar * t * t * sigmoid(raw[1])];
        (out, nll_loss(out, d_true), g)
    }

    /// Accumulates parameter gradients into `acc`; returns (loss, dL/d normalized input).
    fn backprop(&self, trace: &Trace, d_true: f64, acc: Option<&mut Gradients>) -> (f64, Vec<f64>) {
        let (_, loss, g_raw) = self.raw_grad(trace.raw, d_true);
        let mut delta = g_raw.to_vec();
        let mut acc = acc;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            if let Some(acc) = acc.as_deref_mut() {
                let gw = &mut acc.weights[i];
                for (o, d) in delta.iter().enumerate() {
                    acc.bias[i][o] += d;
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            if i > 0 {
                for (p, z) in prev.iter_mut().zip(&trace.pre[i - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        if let Some(acc) = acc {
            acc.mask(self);
        }
        (loss, delta)
    }

    /// Summed NLL gradient of a minibatch, computed with matrix products.
    /// Adds into `acc` and returns the summed loss.
    fn batch_gradient(&self, batch: &[&Sample], acc: &mut Gradients) -> f64 {
        let dim = self.input_dim();
        let cols: Vec<f64> = batch.iter().flat_map(|s| self.normalizer.apply(&s.features)).collect();
        let mut x = DMatrix::from_column_slice(dim, batch.len(), &cols);
        let mats: Vec<DMatrix<f64>> = self
            .layers
            .iter()
            .map(|l| DMatrix::from_row_slice(l.outputs, l.inputs, &l.weights))
            .collect();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, (l, w)) in self.layers.iter().zip(&mats).enumerate() {
            let mut z = w * &x;
            for mut col in z.column_iter_mut() {
                col.iter_mut().zip(&l.bias).for_each(|(v, b)| *v += b);
            }
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut x, z));
        }
        let mut loss = 0.0;
        let mut delta = DMatrix::zeros(2, batch.len());
        for (j, s) in batch.iter().enumerate() {
            let (_, l, g) = self.raw_grad([x[(0, j)], x[(1, j)]], s.d);
            loss += l;
            delta[(0, j)] = g[0];
            delta[(1, j)] = g[1];
        }
        for i in (0..self.layers.len()).rev() {
            let gw = &delta * inputs[i].transpose();
            // the transpose's column-major storage is gw's row-major layout
            for (a, g) in acc.weights[i].iter_mut().zip(gw.transpose().as_slice()) {
                *a += g;
            }
            for (a, row) in acc.bias[i].iter_mut().zip(delta.row_iter()) {
                *a += row.sum();
            }
            if i > 0 {
                let mut prev = mats[i].transpose() * &delta;
                // inputs[i] holds post-ReLU activations; zero means inactive
                prev.zip_apply(&inputs[i], |p, a| {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                });
                delta = prev;
            }
        }
        loss
    }

    /// Analytic NLL gradient with respect to every parameter; pruned weights report 0.
    pub fn loss_gradient(&self, features: &[f64], d_true: f64) -> Result<Gradients> {
        self.check_dim(features)?;
        let mut g = Gradients::zeros_like(self);
        let trace = self.trace(features);
        self.backprop(&trace, d_true, Some(&mut g));
        Ok(g)
    }

    /// NLL gradient with respect to the raw (unnormalized) input features.
    pub fn input_gradient(&self, features: &[f64], d_true: f64) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        let trace = self.trace(features);
        let (_, g) = self.backprop(&trace, d_true, None);
        Ok(g.into_iter()
            .zip(&self.normalizer.feature_scale)
            .map(|(g, s)| g / s)
            .collect())
    }

    /// Minibatch SGD with momentum on the mean NLL. Returns per-epoch mean loss.
    pub fn train(&mut self, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("training set must be nonempty"));
        }
        for s in data {
            self.check_dim(&s.features)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut velocity = Gradients::zeros_like(self);
        let mut history = Vec::with_capacity(cfg.epochs);
        let total = (cfg.epochs * data.len().div_ceil(cfg.batch_size)) as f64;
        let mut step = 0usize;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut grad = Gradients::zeros_like(self);
                let samples: Vec<&Sample> = batch.iter().map(|&i| &data[i]).collect();
                epoch_loss += self.batch_gradient(&samples, &mut grad);
                grad.mask(self);
                grad.scale(1.0 / batch.len() as f64);
                let norm = grad.norm();
                if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                    grad.scale(cfg.max_grad_norm / norm);
                }
                let lr = cfg.schedule.rate(cfg.learning_rate, step as f64 / total);
                step += 1;
                self.apply_update(&mut velocity, &grad, lr, cfg.momentum);
            }
            history.push(epoch_loss / data.len() as f64);
        }
        Ok(history)
    }

    fn apply_update(&mut self, velocity: &mut Gradients, grad: &Gradients, lr: f64, mom: f64) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (((w, v), g), p) in layer
                .weights
                .iter_mut()
                .zip(velocity.weights[i].iter_mut())
                .zip(&grad.weights[i])
                .zip(&layer.pruned)
            {
                if *p {
                    continue;
                }
                *v = mom * *v + g;
                *w -= lr * *v;
            }
            for ((b, v), g) in layer
                .bias
                .iter_mut()
                .zip(velocity.bias[i].iter_mut())
                .zip(&grad.bias[i])
            {
                *v = mom * *v + g;
                *b -= lr * *v;
            }
        }
    }

    /// Central-difference check (`h = 1e-5`) of the analytic gradient over all
    /// unpruned parameters. Relative error uses `max(|analytic|, |numeric|, 1e-3)`
    /// as denominator so that near-zero gradients are judged absolutely.
    /// Perturbations that flip a hidden unit across the ReLU kink are skipped:
    /// the loss is not differentiable there and the difference quotient is
    /// meaningless.
    pub fn gradient_check(&self, features: &[f64], d_true: f64) -> Result<f64> {
        const H: f64 = 1e-5;
        let analytic = self.loss_gradient(features, d_true)?;
        let active = |t: &Trace| -> Vec<bool> { t.pre.iter().flatten().map(|z| *z > 0.0).collect() };
        let base = active(&self.trace(features));
        // NaN marks a probe that crossed a kink
        let loss_at = |net: &MemberNetwork| {
            let t = net.trace(features);
            if active(&t) != base {
                return f64::NAN;
            }
            nll_loss(net.output_from_raw(t.raw), d_true)
        };
        let mut probe = self.clone();
        let mut worst = 0.0f64;
        let mut compare = |a: f64, n: f64| {
            if n.is_nan() {
                return;
            }
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            worst = worst.max(err);
        };
        for li in 0..self.layers.len() {
            for k in 0..self.layers[li].weights.len() {
                if self.layers[li].pruned[k] {
                    continue;
                }
                let w0 = self.layers[li].weights[k];
                probe.layers[li].weights[k] = w0 + H;
                let up = loss_at(&probe);
                probe.layers[li].weights[k] = w0 - H;
                let down = loss_at(&probe);
                probe.layers[li].weights[k] = w0;
                compare(analytic.weights[li][k], (up - down) / (2.0 * H));
            }
            for k in 0..self.layers[li].bias.len() {
                let b0 = self.layers[li].bias[k];
                probe.layers[li].bias[k] = b0 + H;
                let up = loss_at(&probe);
                probe.layers[li].bias[k] = b0 - H;
                let down = loss_at(&probe);
                probe.layers[li].bias[k] = b0;
                compare(analytic.bias[li][k], (up - down) / (2.0 * H));
            }
        }
        Ok(worst)
    }

    /// Mask the `floor(fraction * remaining)` smallest-magnitude unpruned
    /// weights of every prune group; ties go to the lower index. Each hidden
    /// weight matrix is one group. The output matrix is split into its mean
    /// row and its variance row so that neither head can be cut off entirely.
    pub fn prune_iteration(&self, fraction: f64) -> Result<MemberNetwork> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid(format!("prune fraction must lie in (0, 1), got {fraction}")));
        }
        let mut out = self.clone();
        let last = out.layers.len() - 1;
        for (li, layer) in out.layers.iter_mut().enumerate() {
            let group = if li == last { layer.inputs } else { layer.weights.len() };
            for (weights, pruned) in layer
                .weights
                .chunks_mut(group.max(1))
                .zip(layer.pruned.chunks_mut(group.max(1)))
            {
                prune_group(weights, pruned, fraction);
            }
        }
        Ok(out)
    }

    /// Alternate `prune_iteration(fraction)` with fine-tuning for
    /// `iterations` rounds. Round `k` (from 1) fine-tunes with seed
    /// `fine_tune.seed + k`. Returns the member after every round.
    pub fn prune_schedule(
        &self,
        data: &[Sample],
        iterations: usize,
        fraction: f64,
        fine_tune: &TrainConfig,
    ) -> Result<Vec<MemberNetwork>> {
        let mut current = self.clone();
        let mut rounds = Vec::with_capacity(iterations);
        for k in 1..=iterations {
            current = current.prune_iteration(fraction)?;
            let cfg = TrainConfig {
                seed: fine_tune.seed.wrapping_add(k as u64),
                ..fine_tune.clone()
            };
            current.train(data, &cfg)?;
            rounds.push(current.clone());
        }
        Ok(rounds)
    }

    pub fn memory_report(&self) -> MemoryReport {
        let weights = self.total_weights();
        let unpruned = self.unpruned_weights();
        let biases = self.bias_count();
        MemoryReport {
            total_weights: weights,
            unpruned_weights: unpruned,
            biases,
            dense_bytes: VALUE_BYTES * (weights + biases),
            sparse_bytes: (VALUE_BYTES + INDEX_BYTES) * unpruned + VALUE_BYTES * biases,
        }
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            network: self.clone(),
        };
        serde_json::to_string(&ck).expect("member serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::format(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint {:?} v{}",
                ck.format, ck.version
            )));
        }
        ck.network
            .validate()
            .map_err(|e| Error::format(format!("checkpoint: {e}")))?;
        Ok(ck.network)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    network: MemberNetwork,
}

/// Dense versus sparse parameter storage, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub total_weights: usize,
    pub unpruned_weights: usize,
    pub biases: usize,
    pub dense_bytes: usize,
    pub sparse_bytes: usize,
}

/// Fused estimate of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEstimate {
    pub mu: f64,
    pub var: f64,
    pub members: Vec<MemberOutput>,
}

impl EnsembleEstimate {
    pub fn sigma(&self) -> f64 {
        self.var.sqrt()
    }

    /// Gaussian-mixture moments of equally weighted member outputs.
    pub fn from_outputs(members: Vec<MemberOutput>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        let m = members.len() as f64;
        let mu = members.iter().map(|o| o.mu).sum::<f64>() / m;
        let second = members.iter().map(|o| o.var + o.mu * o.mu).sum::<f64>() / m;
        // Written as mean variance plus spread of means, which equals
        // `second - mu^2` but cannot cancel below the mean variance.
        let mean_var = members.iter().map(|o| o.var).sum::<f64>() / m;
        let spread = members.iter().map(|o| (o.mu - mu).powi(2)).sum::<f64>() / m;
        debug_assert!((mean_var + spread - second + mu * mu).abs() <= 1e-9 * second.abs().max(1.0));
        Ok(Self {
            mu,
            var: mean_var + spread,
            members,
        })
    }
}

/// Fuse member predictions for `features`.
pub fn predict_mixture(members: &[MemberNetwork], features: &[f64]) -> Result<EnsembleEstimate> {
    let outs = members
        .iter()
        .map(|m| m.forward(features))
        .collect::<Result<Vec<_>>>()?;
    EnsembleEstimate::from_outputs(outs)
}

/// Architecture and optimizer settings of one ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

/// The default three-member ensemble, heterogeneous by width, batch size and
/// seed. Single wide hidden layers keep enough surviving paths after six
/// halvings; deeper members lose whole units under magnitude pruning.
pub fn default_member_specs() -> Vec<MemberSpec> {
    vec![
        MemberSpec {
            hidden: vec![4096],
            batch_size: 65,
            seed: 11,
        },
        MemberSpec {
            hidden: vec![2048],
            batch_size: 65,
            seed: 23,
        },
        MemberSpec {
            hidden: vec![3072],
            batch_size: 60,
            seed: 37,
        },
    ]
}

/// A trained collection of members.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<MemberNetwork>,
}

impl Ensemble {
    pub fn new(members: Vec<MemberNetwork>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("ensemble needs at least one member"))?;
        if members.iter().any(|m| m.input_dim() != first.input_dim()) {
            return Err(Error::invalid("members disagree on input dimension"));
        }
        Ok(Self { members })
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    pub fn predict(&self, features: &[f64]) -> Result<EnsembleEstimate> {
        predict_mixture(&self.members, features)
    }

    /// Fit normalization and train every member (in parallel when `parallel`).
    /// `base` supplies learning rate, momentum and epochs; batch size and seed
    /// come from each spec.
    pub fn train(
        specs: &[MemberSpec],
        data: &[Sample],
        base: &TrainConfig,
        parallel: bool,
    ) -> Result<(Self, Vec<Vec<f64>>)> {
        let dim = data
            .first()
            .ok_or_else(|| Error::invalid("training set must be nonempty"))?
            .features
            .len();
        let normalizer = Normalizer::fit(data)?;
        let train_one = |spec: &MemberSpec| -> Result<(MemberNetwork, Vec<f64>)> {
            let mut net = MemberNetwork::new(dim, &spec.hidden, spec.seed)?;
            net.set_normalizer(normalizer.clone())?;
            let cfg = TrainConfig {
                batch_size: spec.batch_size,
                seed: spec.seed,
                ..base.clone()
            };
            let hist = net.train(data, &cfg)?;
            Ok((net, hist))
        };
        let results: Vec<Result<_>> = if parallel {
            specs.par_iter().map(train_one).collect()
        } else {
            specs.iter().map(train_one).collect()
        };
        let mut members = Vec::new();
        let mut hists = Vec::new();
        for r in results {
            let (m, h) = r?;
            members.push(m);
            hists.push(h);
        }
        Ok((Self::new(members)?, hists))
    }

    /// Mean absolute error of the fused mean.
    pub fn mae(&self, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("evaluation set must be nonempty"));
        }
        let mut total = 0.0;
        for s in data {
            total += (self.predict(&s.features)?.mu - s.d).abs();
        }
        Ok(total / data.len() as f64)
    }
}
