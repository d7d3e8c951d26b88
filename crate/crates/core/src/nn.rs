//! Probabilistic dynamics ensemble.
//!
//! Each member is a small tanh MLP whose output layer carries a mean and a
//! log-variance per state coordinate (a diagonal Gaussian). Members are
//! trained independently on the same buffer with their own initialization
//! and shuffle seeds by minimizing the Gaussian negative log likelihood
//!
//! ```text
//! (μ(s,a) − y)ᵀ Σ⁻¹(s,a) (μ(s,a) − y) + log det Σ(s,a)
//! ```
//!
//! averaged over the batch. Gradients are hand-derived reverse mode.
//!
//! The networks are deliberately small (two hidden layers of 64 units by
//! default): the continuous tasks here have two to four state dimensions.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::wrap_angle;
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One environment transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.state
            .iter()
            .chain(&self.action)
            .chain(&self.next_state)
            .all(|x| x.is_finite())
            && self.reward.is_finite()
    }
}

/// A normalized training pair for a single network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
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

/// Inverse of softplus on `(0, ∞)`.
fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// MLP with a diagonal-Gaussian head. Parameters are stored flat, layer by
/// layer, each as a row-major `out × in` weight block followed by biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
    log_var_min: f64,
    log_var_max: f64,
}

/// Scratch buffers for forward and backward passes.
#[derive(Default)]
struct Workspace {
    /// Layer inputs; `acts[l]` feeds layer `l`, the last entry is the raw output.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    prev: Vec<f64>,
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOutput {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianNet {
    /// Xavier-uniform weights, zero biases.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        log_var_bounds: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("network", "layer sizes must be positive"));
        }
        if !(log_var_bounds.0 < log_var_bounds.1) {
            return Err(Error::invalid("network", "log-variance bounds must be ordered"));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * output_dim);
        let mut rng = rng::seeded(seed);
        let mut params = Vec::with_capacity(param_count(&sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            sizes,
            params,
            log_var_min: log_var_bounds.0,
            log_var_max: log_var_bounds.1,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1] / 2
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn log_var_bounds(&self) -> (f64, f64) {
        (self.log_var_min, self.log_var_max)
    }

    /// Zeroes the output weights and sets the output biases so the net
    /// predicts `mean` and `log_var` everywhere.
    pub fn set_constant_output(&mut self, mean: &[f64], log_var: &[f64]) -> Result<()> {
        let d = self.output_dim();
        if mean.len() != d || log_var.len() != d {
            return Err(Error::Shape("constant output dims".into()));
        }
        let (lo, hi) = (self.log_var_min, self.log_var_max);
        if log_var.iter().any(|&v| !(v > lo && v < hi)) {
            return Err(Error::invalid("log variance", "must lie strictly inside the clamp"));
        }
        let n = self.sizes.len();
        let (fan_in, fan_out) = (self.sizes[n - 2], self.sizes[n - 1]);
        let off = self.params.len() - fan_out - fan_in * fan_out;
        self.params[off..off + fan_in * fan_out].fill(0.0);
        let bias = &mut self.params[off + fan_in * fan_out..];
        bias[..d].copy_from_slice(mean);
        for (b, &lv) in bias[d..].iter_mut().zip(log_var) {
            // invert lv = lo + sp(hi − sp(hi − raw) − lo)
            let inner = lo + softplus_inv(lv - lo);
            *b = hi - softplus_inv(hi - inner);
        }
        Ok(())
    }

    fn soft_clamp(&self, raw: f64) -> (f64, f64) {
        let (lo, hi) = (self.log_var_min, self.log_var_max);
        let upper = hi - softplus(hi - raw);
        let lv = lo + softplus(upper - lo);
        if lv > hi {
            return (hi, 0.0);
        }
        (lv, sigmoid(hi - raw) * sigmoid(upper - lo))
    }

    /// `(fan_in, fan_out, offset)` of each layer.
    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.sizes.windows(2).scan(0, |off, w| {
            let here = *off;
            *off += w[0] * w[1] + w[1];
            Some((w[0], w[1], here))
        })
    }

    /// Forward pass into `acts`. Only the first `rows` outputs of the last
    /// layer are computed.
    fn forward_into(&self, input: &[f64], acts: &mut Vec<Vec<f64>>, rows: usize) {
        acts.resize_with(self.sizes.len(), Vec::new);
        acts[0].clear();
        acts[0].extend_from_slice(input);
        let last = self.sizes.len() - 2;
        for (l, (fan_in, fan_out, off)) in self.layers().enumerate() {
            let weights = &self.params[off..off + fan_in * fan_out];
            let bias = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let (head, tail) = acts.split_at_mut(l + 1);
            let (x, y) = (&head[l], &mut tail[0]);
            y.clear();
            let n = if l == last { rows.min(fan_out) } else { fan_out };
            y.extend(weights.chunks_exact(fan_in).zip(bias).take(n).map(|(row, b)| b + dot(row, x)));
            if l < last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> GaussianOutput {
        let mut acts = Vec::new();
        self.forward_into(input, &mut acts, usize::MAX);
        let raw = acts.last().expect("at least one layer");
        let d = self.output_dim();
        GaussianOutput {
            mean: raw[..d].to_vec(),
            log_var: raw[d..].iter().map(|&r| self.soft_clamp(r).0).collect(),
        }
    }

    /// Adds this net's mean output to `out` and, when `jac` is given, the
    /// Jacobian of that mean with respect to the input (row-major
    /// `output_dim × input_dim`) to `jac`.
    fn accumulate_mean(&self, input: &[f64], out: &mut [f64], jac: Option<&mut [f64]>, ws: &mut Workspace) {
        let d = self.output_dim();
        let Some(jac) = jac else {
            self.forward_into(input, &mut ws.acts, d);
            out.iter_mut().zip(&ws.acts[self.sizes.len() - 1]).for_each(|(o, v)| *o += v);
            return;
        };
        // forward-mode: carry ∂a/∂input (fan × input_dim, row-major) per layer
        let n_in = self.input_dim();
        let mut x = input.to_vec();
        let mut tangent: Vec<f64> = (0..n_in * n_in).map(|i| if i / n_in == i % n_in { 1.0 } else { 0.0 }).collect();
        let last = self.sizes.len() - 2;
        for (l, (fan_in, fan_out, off)) in self.layers().enumerate() {
            let weights = &self.params[off..off + fan_in * fan_out];
            let bias = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let n = if l == last { d } else { fan_out };
            let mut y = Vec::with_capacity(n);
            let mut ty = vec![0.0; n * n_in];
            for (o, (row, b)) in weights.chunks_exact(fan_in).zip(bias).take(n).enumerate() {
                y.push(b + dot(row, &x));
                let t_row = &mut ty[o * n_in..(o + 1) * n_in];
                for (i, w) in row.iter().enumerate() {
                    for (t, s) in t_row.iter_mut().zip(&tangent[i * n_in..(i + 1) * n_in]) {
                        *t += w * s;
                    }
                }
            }
            if l < last {
                for (o, v) in y.iter_mut().enumerate() {
                    *v = v.tanh();
                    let g = 1.0 - *v * *v;
                    ty[o * n_in..(o + 1) * n_in].iter_mut().for_each(|t| *t *= g);
                }
            }
            x = y;
            tangent = ty;
        }
        out.iter_mut().zip(&x).for_each(|(o, v)| *o += v);
        jac.iter_mut().zip(&tangent).for_each(|(j, t)| *j += t);
    }

    /// Adds the gradient of one sample's loss, scaled by `scale`, into
    /// `grad`, returning the sample loss.
    fn backward(&self, sample: &Sample, scale: f64, grad: &mut [f64], ws: &mut Workspace) -> f64 {
        self.forward_into(&sample.input, &mut ws.acts, usize::MAX);
        let d = self.output_dim();
        let raw = ws.acts.last().expect("output");
        let delta = &mut ws.delta;
        delta.clear();
        delta.resize(2 * d, 0.0);
        let mut loss = 0.0;
        for j in 0..d {
            let (lv, dlv) = self.soft_clamp(raw[d + j]);
            let err = raw[j] - sample.target[j];
            let inv_var = (-lv).exp();
            loss += err * err * inv_var + lv;
            delta[j] = 2.0 * err * inv_var * scale;
            delta[d + j] = (1.0 - err * err * inv_var) * dlv * scale;
        }
        let n_layers = self.sizes.len() - 1;
        let mut off_end = self.params.len();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = off_end - fan_out - fan_in * fan_out;
            let x = &ws.acts[l];
            for (o, &dl) in ws.delta.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += dl * xi;
                }
                grad[off + fan_in * fan_out + o] += dl;
            }
            if l > 0 {
                let weights = &self.params[off..off + fan_in * fan_out];
                let prev = &mut ws.prev;
                prev.clear();
                prev.resize(fan_in, 0.0);
                for (o, &dl) in ws.delta.iter().enumerate() {
                    for (p, w) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *p += dl * w;
                    }
                }
                // tanh' = 1 − tanh²
                for (p, a) in prev.iter_mut().zip(x) {
                    *p *= 1.0 - a * a;
                }
                std::mem::swap(&mut ws.delta, &mut ws.prev);
            }
            off_end = off;
        }
        loss
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.input.len() != self.input_dim() || s.target.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "sample dims {}→{}, net dims {}→{}",
                s.input.len(),
                s.target.len(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) || !self.sizes[self.sizes.len() - 1].is_multiple_of(2) {
            return Err(Error::invalid("network", "bad layer sizes"));
        }
        let expected = checked_param_count(&self.sizes)
            .ok_or_else(|| Error::invalid("network", "parameter count overflows"))?;
        if self.params.len() != expected {
            return Err(Error::invalid("network", "parameter count mismatch"));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericalFailure("network parameters".into()));
        }
        if !(self.log_var_min < self.log_var_max) {
            return Err(Error::invalid("network", "log-variance bounds"));
        }
        Ok(())
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn checked_param_count(sizes: &[usize]) -> Option<usize> {
    sizes.windows(2).try_fold(0usize, |acc, w| {
        w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc)
    })
}

/// Mean Gaussian NLL over the batch and its parameter gradient.
pub fn nll_loss(net: &GaussianNet, batch: &[Sample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    for s in batch {
        net.check_sample(s)?;
    }
    let mut grad = vec![0.0; net.params.len()];
    let loss = batch_loss(net, batch.iter(), batch.len(), &mut grad, &mut Workspace::default())?;
    Ok((loss, grad))
}

/// Mean loss of `n` checked samples; the gradient overwrites `grad`.
fn batch_loss<'a>(
    net: &GaussianNet,
    batch: impl Iterator<Item = &'a Sample>,
    n: usize,
    grad: &mut [f64],
    ws: &mut Workspace,
) -> Result<f64> {
    grad.fill(0.0);
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    for s in batch {
        loss += net.backward(s, scale, grad, ws);
    }
    loss *= scale;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure("nll loss".into()));
    }
    Ok(loss)
}

/// Adaptive-moment optimizer state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Per-coordinate affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for row in rows {
            n += 1;
            for j in 0..dim {
                let d = row[j] - mean[j];
                mean[j] += d / n as f64;
                m2[j] += d * (row[j] - mean[j]);
            }
        }
        let std = m2
            .iter()
            .map(|v| {
                let s = if n > 1 { (v / n as f64).sqrt() } else { 0.0 };
                if s < 1e-6 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.mean.len() != dim || self.std.len() != dim {
            return Err(Error::invalid("normalizer", "dimension mismatch"));
        }
        if self.mean.iter().any(|m| !m.is_finite())
            || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::invalid("normalizer", "non-finite or non-positive statistics"));
        }
        Ok(())
    }
}

/// How one ensemble is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub ensemble_size: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub seed: u64,
    /// Predict `s' − s` rather than `s'`.
    #[serde(default = "default_true")]
    pub predict_delta: bool,
    #[serde(default = "default_lv_min")]
    pub log_var_min: f64,
    #[serde(default = "default_lv_max")]
    pub log_var_max: f64,
    /// State coordinates that are wrapped angles.
    #[serde(default)]
    pub angle_dims: Vec<usize>,
    /// Explicit `(init, shuffle)` seeds per member; derived from `seed`
    /// when absent.
    #[serde(default)]
    pub member_seeds: Option<Vec<(u64, u64)>>,
    /// Cap on minibatch updates per member in one training call; the epoch
    /// loop stops once it is reached.
    #[serde(default)]
    pub max_updates: Option<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_lr() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}
fn default_lv_min() -> f64 {
    -10.0
}
fn default_lv_max() -> f64 {
    2.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 5,
            hidden: default_hidden(),
            epochs: 5,
            batch_size: 64,
            learning_rate: default_lr(),
            seed: 0,
            predict_delta: true,
            log_var_min: default_lv_min(),
            log_var_max: default_lv_max(),
            angle_dims: Vec::new(),
            member_seeds: None,
            max_updates: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train config", "ensemble_size and batch_size must be >= 1"));
        }
        if self.hidden.contains(&0) || self.hidden.len() > 8 || self.hidden.iter().any(|h| *h > 4096) {
            return Err(Error::invalid("train config", "hidden sizes must be in 1..=4096, at most 8 layers"));
        }
        if !(self.learning_rate > 0.0) || !(self.log_var_min < self.log_var_max) {
            return Err(Error::invalid("train config", "learning rate or log-variance bounds"));
        }
        if self.max_updates == Some(0) {
            return Err(Error::invalid("train config", "max_updates must be >= 1"));
        }
        if let Some(seeds) = &self.member_seeds {
            if seeds.len() != self.ensemble_size {
                return Err(Error::invalid("train config", "one seed pair per member"));
            }
        }
        Ok(())
    }

    fn seeds(&self, k: usize) -> (u64, u64) {
        match &self.member_seeds {
            Some(s) => s[k],
            None => (
                rng::derive(self.seed, 2 * k as u64),
                rng::derive(self.seed, 2 * k as u64 + 1),
            ),
        }
    }
}

/// `K` Gaussian networks plus the normalization they were trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnsembleCheckpoint", into = "EnsembleCheckpoint")]
pub struct GaussianEnsemble {
    members: Vec<GaussianNet>,
    state_dim: usize,
    action_dim: usize,
    input_norm: Normalizer,
    target_norm: Normalizer,
    predict_delta: bool,
    angle_dims: Vec<usize>,
}

/// Serialized form of a [`GaussianEnsemble`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleCheckpoint {
    version: u32,
    state_dim: usize,
    action_dim: usize,
    ensemble_size: usize,
    predict_delta: bool,
    angle_dims: Vec<usize>,
    input_norm: Normalizer,
    target_norm: Normalizer,
    members: Vec<GaussianNet>,
}

impl TryFrom<EnsembleCheckpoint> for GaussianEnsemble {
    type Error = Error;

    fn try_from(c: EnsembleCheckpoint) -> Result<Self> {
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::invalid("checkpoint", format!("unsupported version {}", c.version)));
        }
        if c.members.len() != c.ensemble_size {
            return Err(Error::invalid("checkpoint", "member count differs from ensemble_size"));
        }
        let e = GaussianEnsemble {
            members: c.members,
            state_dim: c.state_dim,
            action_dim: c.action_dim,
            input_norm: c.input_norm,
            target_norm: c.target_norm,
            predict_delta: c.predict_delta,
            angle_dims: c.angle_dims,
        };
        e.validate()?;
        Ok(e)
    }
}

impl From<GaussianEnsemble> for EnsembleCheckpoint {
    fn from(e: GaussianEnsemble) -> Self {
        EnsembleCheckpoint {
            version: CHECKPOINT_VERSION,
            state_dim: e.state_dim,
            action_dim: e.action_dim,
            ensemble_size: e.members.len(),
            predict_delta: e.predict_delta,
            angle_dims: e.angle_dims,
            input_norm: e.input_norm,
            target_norm: e.target_norm,
            members: e.members,
        }
    }
}

/// Output of [`GaussianEnsemble::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Next state from the member-averaged prediction.
    pub mean: Vec<f64>,
    pub member_means: Vec<Vec<f64>>,
    pub member_vars: Vec<Vec<f64>>,
}

impl GaussianEnsemble {
    /// Freshly initialized members with identity normalization.
    pub fn init(state_dim: usize, action_dim: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if state_dim == 0 {
            return Err(Error::invalid("ensemble", "state_dim must be >= 1"));
        }
        let members = (0..cfg.ensemble_size)
            .map(|k| {
                GaussianNet::new(
                    state_dim + action_dim,
                    &cfg.hidden,
                    state_dim,
                    (cfg.log_var_min, cfg.log_var_max),
                    cfg.seeds(k).0,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let e = Self {
            members,
            state_dim,
            action_dim,
            input_norm: Normalizer::identity(state_dim + action_dim),
            target_norm: Normalizer::identity(state_dim),
            predict_delta: cfg.predict_delta,
            angle_dims: cfg.angle_dims.clone(),
        };
        e.validate()?;
        Ok(e)
    }

    /// Builds an ensemble from existing members, with identity
    /// normalization and absolute-state targets.
    pub fn from_members(members: Vec<GaussianNet>, state_dim: usize, action_dim: usize) -> Result<Self> {
        let e = Self {
            members,
            state_dim,
            action_dim,
            input_norm: Normalizer::identity(state_dim + action_dim),
            target_norm: Normalizer::identity(state_dim),
            predict_delta: false,
            angle_dims: Vec::new(),
        };
        e.validate()?;
        Ok(e)
    }

    fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::invalid("ensemble", "needs at least one member"));
        }
        for m in &self.members {
            m.validate()?;
            if m.input_dim() != self.state_dim + self.action_dim || m.output_dim() != self.state_dim {
                return Err(Error::invalid("ensemble", "member dimensions disagree"));
            }
        }
        self.input_norm.validate(self.state_dim + self.action_dim)?;
        self.target_norm.validate(self.state_dim)?;
        if self.angle_dims.iter().any(|&d| d >= self.state_dim) {
            return Err(Error::invalid("ensemble", "angle dimension out of range"));
        }
        Ok(())
    }

    pub fn members(&self) -> &[GaussianNet] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn angle_dims(&self) -> &[usize] {
        &self.angle_dims
    }

    /// Difference `a − b` with angle coordinates wrapped.
    pub fn state_diff(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        for &i in &self.angle_dims {
            d[i] = wrap_angle(d[i]);
        }
        d
    }

    fn apply_delta(&self, s: &[f64], delta: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = s.iter().zip(delta).map(|(x, d)| x + d).collect();
        for &i in &self.angle_dims {
            out[i] = wrap_angle(out[i]);
        }
        out
    }

    fn input(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.state_dim + self.action_dim);
        x.extend_from_slice(state);
        x.extend_from_slice(action);
        self.input_norm.apply(&x)
    }

    fn check_dims(&self, state: &[f64], action: &[f64]) -> Result<()> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(Error::Shape(format!(
                "got state {} / action {}, ensemble expects {} / {}",
                state.len(),
                action.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        Ok(())
    }

    /// Member `k`'s predicted target (delta or absolute) and variance in
    /// raw units.
    fn member_target(&self, k: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let out = self.members[k].forward(x);
        let mean = self.target_norm.invert(&out.mean);
        let var = out
            .log_var
            .iter()
            .zip(&self.target_norm.std)
            .map(|(lv, s)| lv.exp() * s * s)
            .collect();
        (mean, var)
    }

    fn to_state(&self, state: &[f64], target: &[f64]) -> Vec<f64> {
        if self.predict_delta {
            self.apply_delta(state, target)
        } else {
            let mut out = target.to_vec();
            for &i in &self.angle_dims {
                out[i] = wrap_angle(out[i]);
            }
            out
        }
    }

    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<Prediction> {
        self.check_dims(state, action)?;
        let x = self.input(state, action);
        let mut avg = vec![0.0; self.state_dim];
        let mut member_means = Vec::with_capacity(self.members.len());
        let mut member_vars = Vec::with_capacity(self.members.len());
        for k in 0..self.members.len() {
            let (t, v) = self.member_target(k, &x);
            avg.iter_mut().zip(&t).for_each(|(a, b)| *a += b);
            member_means.push(self.to_state(state, &t));
            member_vars.push(v);
        }
        let inv = 1.0 / self.members.len() as f64;
        avg.iter_mut().for_each(|a| *a *= inv);
        Ok(Prediction {
            mean: self.to_state(state, &avg),
            member_means,
            member_vars,
        })
    }

    /// Ensemble-mean next state, skipping the per-member bookkeeping.
    pub fn predict_mean(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let x = self.input(state, action);
        let mut avg = vec![0.0; self.state_dim];
        let mut ws = Workspace::default();
        for m in &self.members {
            m.accumulate_mean(&x, &mut avg, None, &mut ws);
        }
        let inv = 1.0 / self.members.len() as f64;
        avg.iter_mut().for_each(|a| *a *= inv);
        let t = self.target_norm.invert(&avg);
        self.to_state(state, &t)
    }

    /// [`predict_mean`](Self::predict_mean) with its Jacobian with respect
    /// to state and action, row-major `state_dim × (state_dim + action_dim)`.
    /// Angle wrapping of the output is ignored in the derivative.
    pub fn predict_mean_jacobian(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, w) = (self.state_dim, self.state_dim + self.action_dim);
        let x = self.input(state, action);
        let mut avg = vec![0.0; n];
        let mut jac = vec![0.0; n * w];
        let mut ws = Workspace::default();
        for m in &self.members {
            m.accumulate_mean(&x, &mut avg, Some(&mut jac), &mut ws);
        }
        let inv = 1.0 / self.members.len() as f64;
        avg.iter_mut().for_each(|a| *a *= inv);
        for i in 0..n {
            for j in 0..w {
                jac[i * w + j] *= inv * self.target_norm.std[i] / self.input_norm.std[j];
            }
            if self.predict_delta {
                jac[i * w + i] += 1.0;
            }
        }
        let t = self.target_norm.invert(&avg);
        (self.to_state(state, &t), jac)
    }

    /// Next state drawn from member `k`'s Gaussian.
    pub fn sample_member(&self, k: usize, state: &[f64], action: &[f64], rng: &mut rng::Rng) -> Vec<f64> {
        let x = self.input(state, action);
        let (mean, var) = self.member_target(k, &x);
        let t: Vec<f64> = mean
            .iter()
            .zip(&var)
            .map(|(m, v)| m + v.sqrt() * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng))
            .collect();
        self.to_state(state, &t)
    }

    fn sample_of(&self, t: &Transition) -> Sample {
        let target = if self.predict_delta {
            self.state_diff(&t.next_state, &t.state)
        } else {
            t.next_state.clone()
        };
        Sample {
            input: self.input(&t.state, &t.action),
            target: self.target_norm.apply(&target),
        }
    }
}

/// Result of [`train_ensemble`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub ensemble: GaussianEnsemble,
    /// Mean minibatch loss of the last epoch, per member.
    pub final_losses: Vec<f64>,
    /// Mean minibatch loss per epoch, per member.
    pub epoch_losses: Vec<Vec<f64>>,
}

/// Fits every member on the full buffer. Members start from `warm_start`
/// when given, else from seeded initializations; normalization statistics
/// are refit on the buffer either way.
pub fn train_ensemble(
    buffer: &[Transition],
    state_dim: usize,
    action_dim: usize,
    cfg: &TrainConfig,
    warm_start: Option<&GaussianEnsemble>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(Error::Empty("training buffer"));
    }
    if buffer
        .iter()
        .any(|t| t.state.len() != state_dim || t.next_state.len() != state_dim || t.action.len() != action_dim)
    {
        return Err(Error::Shape("transition dimensions differ from the ensemble".into()));
    }
    if buffer.iter().any(|t| !t.is_finite()) {
        return Err(Error::NumericalFailure("training buffer".into()));
    }
    let mut ens = match warm_start {
        Some(w) if w.members.len() == cfg.ensemble_size && w.state_dim == state_dim && w.action_dim == action_dim => {
            w.clone()
        }
        Some(_) => return Err(Error::Shape("warm-start ensemble does not match the config".into())),
        None => GaussianEnsemble::init(state_dim, action_dim, cfg)?,
    };
    ens.predict_delta = cfg.predict_delta;
    ens.angle_dims = cfg.angle_dims.clone();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            final_losses: vec![f64::NAN; ens.members.len()],
            epoch_losses: vec![Vec::new(); ens.members.len()],
            ensemble: ens,
        });
    }
    let inputs: Vec<Vec<f64>> = buffer
        .iter()
        .map(|t| t.state.iter().chain(&t.action).copied().collect())
        .collect();
    ens.input_norm = Normalizer::fit(inputs.iter().map(|v| v.as_slice()), state_dim + action_dim);
    let targets: Vec<Vec<f64>> = buffer
        .iter()
        .map(|t| {
            if cfg.predict_delta {
                ens.state_diff(&t.next_state, &t.state)
            } else {
                t.next_state.clone()
            }
        })
        .collect();
    ens.target_norm = Normalizer::fit(targets.iter().map(|v| v.as_slice()), state_dim);
    let samples: Vec<Sample> = buffer.iter().map(|t| ens.sample_of(t)).collect();

    let results: Vec<Result<(GaussianNet, Vec<f64>)>> = ens
        .members
        .par_iter()
        .enumerate()
        .map(|(k, net)| train_member(net.clone(), &samples, cfg, cfg.seeds(k).1))
        .collect();
    let mut epoch_losses = Vec::with_capacity(results.len());
    for (slot, r) in ens.members.iter_mut().zip(results) {
        let (net, losses) = r?;
        *slot = net;
        epoch_losses.push(losses);
    }
    Ok(TrainOutcome {
        final_losses: epoch_losses.iter().map(|l| *l.last().expect("epochs >= 1")).collect(),
        epoch_losses,
        ensemble: ens,
    })
}

fn train_member(
    mut net: GaussianNet,
    samples: &[Sample],
    cfg: &TrainConfig,
    shuffle_seed: u64,
) -> Result<(GaussianNet, Vec<f64>)> {
    let mut rng = rng::seeded(shuffle_seed);
    let mut adam = Adam::new(net.params.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0; net.params.len()];
    let mut ws = Workspace::default();
    let mut budget = cfg.max_updates.unwrap_or(usize::MAX);
    for _ in 0..cfg.epochs {
        if budget == 0 {
            break;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size).take(budget) {
            let loss = batch_loss(&net, chunk.iter().map(|&i| &samples[i]), chunk.len(), &mut grad, &mut ws)?;
            adam.step(&mut net.params, &grad);
            total += loss;
            batches += 1;
        }
        budget -= batches;
        losses.push(total / batches as f64);
    }
    if net.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NumericalFailure("trained parameters".into()));
    }
    Ok((net, losses))
}

/// `E_{(s,a,s')}[ (1/K) Σ_k ‖s' − f_k(s,a)‖ ]` with angle-aware differences.
pub fn one_step_error(ensemble: &GaussianEnsemble, tuples: &[Transition]) -> Result<f64> {
    if tuples.is_empty() {
        return Err(Error::Empty("slice"));
    }
    let mut total = 0.0;
    for t in tuples {
        let p = ensemble.predict(&t.state, &t.action)?;
        let per: f64 = p
            .member_means
            .iter()
            .map(|m| norm(&ensemble.state_diff(&t.next_state, m)))
            .sum();
        total += per / p.member_means.len() as f64;
    }
    Ok(total / tuples.len() as f64)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_net(seed: u64) -> GaussianNet {
        GaussianNet::new(3, &[5, 4], 2, (-10.0, 2.0), seed).unwrap()
    }

    #[test]
    fn perfect_mean_unit_variance_has_zero_loss() {
        let mut net = tiny_net(0);
        net.set_constant_output(&[0.5, -1.0], &[0.0, 0.0]).unwrap();
        let batch = vec![Sample {
            input: vec![0.1, 0.2, 0.3],
            target: vec![0.5, -1.0],
        }];
        let (loss, _) = nll_loss(&net, &batch).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_mean_variance_e_has_unit_loss() {
        let mut net = GaussianNet::new(2, &[4], 1, (-10.0, 2.0), 1).unwrap();
        net.set_constant_output(&[2.0], &[1.0]).unwrap();
        let batch = vec![Sample {
            input: vec![1.0, -1.0],
            target: vec![2.0],
        }];
        assert_abs_diff_eq!(nll_loss(&net, &batch).unwrap().0, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn log_variance_stays_inside_clamp() {
        let net = tiny_net(3);
        for raw in [-1e6, -50.0, -10.0, 0.0, 2.0, 50.0, 1e6] {
            let (lv, d) = net.soft_clamp(raw);
            assert!((-10.0..=2.0).contains(&lv), "{raw} -> {lv}");
            assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(nll_loss(&tiny_net(0), &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig {
            ensemble_size: 2,
            hidden: vec![8],
            epochs: 0,
            ..TrainConfig::default()
        };
        let init = GaussianEnsemble::init(1, 1, &cfg).unwrap();
        let buf = vec![Transition {
            state: vec![0.0],
            action: vec![1.0],
            next_state: vec![1.0],
            reward: 0.0,
        }];
        let out = train_ensemble(&buf, 1, 1, &cfg, None).unwrap();
        assert_eq!(out.ensemble, init);
        assert!(train_ensemble(&[], 1, 1, &cfg, None).is_err());
    }

    #[test]
    fn one_step_error_norm_arithmetic() {
        let mut net = GaussianNet::new(3, &[4], 2, (-10.0, 2.0), 0).unwrap();
        net.set_constant_output(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let e = GaussianEnsemble::from_members(vec![net], 2, 1).unwrap();
        let t = Transition {
            state: vec![9.0, 9.0],
            action: vec![0.0],
            next_state: vec![3.0, 4.0],
            reward: 0.0,
        };
        assert_abs_diff_eq!(one_step_error(&e, &[t]).unwrap(), 5.0, epsilon = 1e-12);
        assert!(matches!(one_step_error(&e, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn symmetric_members_average_to_zero() {
        let mut a = GaussianNet::new(2, &[3], 2, (-10.0, 2.0), 0).unwrap();
        let mut b = a.clone();
        a.set_constant_output(&[1.5, -2.0], &[0.0, 0.0]).unwrap();
        b.set_constant_output(&[-1.5, 2.0], &[0.0, 0.0]).unwrap();
        let e = GaussianEnsemble::from_members(vec![a.clone(), b], 2, 0).unwrap();
        let p = e.predict(&[0.3, 0.4], &[]).unwrap();
        assert_eq!(p.mean, vec![0.0, 0.0]);
        assert_eq!(p.member_means[0], vec![1.5, -2.0]);
        let single = GaussianEnsemble::from_members(vec![a.clone(), a], 2, 0).unwrap();
        let p = single.predict(&[0.3, 0.4], &[]).unwrap();
        assert_eq!(p.mean, p.member_means[0]);
        assert!(single.predict(&[0.3], &[]).is_err());
    }

    #[test]
    fn checkpoint_rejects_inconsistent_documents() {
        let cfg = TrainConfig {
            ensemble_size: 2,
            hidden: vec![4],
            ..TrainConfig::default()
        };
        let e = GaussianEnsemble::init(2, 1, &cfg).unwrap();
        let mut v = serde_json::to_value(&e).unwrap();
        v["ensemble_size"] = 3.into();
        assert!(serde_json::from_value::<GaussianEnsemble>(v).is_err());
        let mut v = serde_json::to_value(&e).unwrap();
        v["version"] = 99.into();
        assert!(serde_json::from_value::<GaussianEnsemble>(v).is_err());
    }
}
