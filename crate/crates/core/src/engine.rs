//! The model-based training loop.
//!
//! Each step the current policy acts in the real environment and the
//! transition lands in the environment buffer `D_e` and the fresh slice
//! `ΔD`. Every `F` steps after a training the shift monitor folds a new
//! estimate into its accumulator; when it fires (or `t_max` is reached) the
//! model is retrained on all of `D_e`, `ΔD` is cleared, the coverage anchor
//! is reset and the oracle produces a new policy. Short rollouts of the
//! freshest model fill the model buffer `D_m` once per round.
//!
//! Until the first training the policy is uniform random; the first
//! training happens `t_min` steps in. The fixed-interval baseline is the
//! same loop with `t_min = t_max = k`.

use std::collections::VecDeque;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{categorical, Environment, TabularEnv};
use crate::error::{Error, Result};
use crate::mdp::{TabularMdp, TabularPolicy};
use crate::nn::{one_step_error, train_ensemble, GaussianEnsemble, TrainConfig, Transition};
use crate::oracles::{optimize, ActionBounds, EnsembleDynamics, OracleModel, OraclePolicy, OracleSpec, PlannerPolicy};
use crate::rng::{self, Rng};
use crate::shift::{
    coverage_volume, read_trace_csv, trigger_step, write_trace_csv, Decision, EstimateRecord, ShiftEstimate,
    TriggerConfig, TriggerState,
};

pub const RECORD_VERSION: u32 = 1;

/// A decision rule used both in the environment and inside model rollouts.
pub trait Policy: Send {
    fn act(&mut self, state: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;
    /// Action at step `t` of a model rollout; leaves the policy unchanged.
    fn rollout_action(&self, state: &[f64], t: usize, rng: &mut Rng) -> Vec<f64>;
    fn reset(&mut self) {}
}

/// Uniform over the action box.
pub struct RandomPolicy {
    bounds: ActionBounds,
}

impl RandomPolicy {
    pub fn new(bounds: ActionBounds) -> Self {
        Self { bounds }
    }

    fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.bounds
            .low
            .iter()
            .zip(&self.bounds.high)
            .map(|(&l, &h)| if l < h { rng.gen_range(l..=h) } else { l })
            .collect()
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _state: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.sample(rng))
    }
    fn rollout_action(&self, _state: &[f64], _t: usize, rng: &mut Rng) -> Vec<f64> {
        self.sample(rng)
    }
}

/// A tabular policy acting on one-hot states.
pub struct TabularAgent {
    policy: TabularPolicy,
}

impl TabularAgent {
    pub fn new(policy: TabularPolicy) -> Self {
        Self { policy }
    }

    fn sample(&self, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        let s = TabularEnv::state_index(state);
        vec![categorical(rng, self.policy.row(s)) as f64]
    }
}

impl Policy for TabularAgent {
    fn act(&mut self, state: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.sample(state, rng))
    }
    fn rollout_action(&self, state: &[f64], _t: usize, rng: &mut Rng) -> Vec<f64> {
        self.sample(state, rng)
    }
}

impl Policy for PlannerPolicy {
    fn act(&mut self, state: &[f64], _rng: &mut Rng) -> Result<Vec<f64>> {
        PlannerPolicy::act(self, state)
    }
    fn rollout_action(&self, state: &[f64], t: usize, _rng: &mut Rng) -> Vec<f64> {
        self.feedback_action(state, t)
    }
    fn reset(&mut self) {
        PlannerPolicy::reset(self)
    }
}

/// Learns a transition model from `D_e`.
pub trait ModelLearner: Send {
    fn train(&mut self, buffer: &[Transition], seed: u64) -> Result<()>;
    /// Number of completed trainings; 0 means no model yet.
    fn version(&self) -> u64;
    /// Mean one-step prediction error on `slice`.
    fn prediction_error(&self, slice: &[Transition]) -> Result<f64>;
    /// Next state from the model.
    fn model_step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;
    /// Runs the oracle on the current model.
    fn make_policy(&self, oracle: &OracleSpec, env: &Arc<dyn Environment>) -> Result<Box<dyn Policy>>;
}

/// Probabilistic-ensemble learner for continuous environments.
pub struct EnsembleLearner {
    cfg: TrainConfig,
    warm_start: bool,
    sample_members: bool,
    state_dim: usize,
    action_dim: usize,
    ensemble: Option<Arc<GaussianEnsemble>>,
    version: u64,
}

impl EnsembleLearner {
    pub fn new(env: &dyn Environment, cfg: TrainConfig, warm_start: bool, sample_members: bool) -> Result<Self> {
        let mut cfg = cfg;
        cfg.angle_dims = env.angle_dims();
        cfg.validate()?;
        Ok(Self {
            cfg,
            warm_start,
            sample_members,
            state_dim: env.spec().state_dim,
            action_dim: env.spec().action_dim,
            ensemble: None,
            version: 0,
        })
    }

    /// A learner that already holds `ensemble` as version 1.
    pub fn from_ensemble(ensemble: GaussianEnsemble, sample_members: bool) -> Self {
        Self {
            cfg: TrainConfig {
                ensemble_size: ensemble.len(),
                angle_dims: ensemble.angle_dims().to_vec(),
                ..TrainConfig::default()
            },
            warm_start: true,
            sample_members,
            state_dim: ensemble.state_dim(),
            action_dim: ensemble.action_dim(),
            ensemble: Some(Arc::new(ensemble)),
            version: 1,
        }
    }

    pub fn ensemble(&self) -> Option<&Arc<GaussianEnsemble>> {
        self.ensemble.as_ref()
    }

    fn current(&self) -> Result<&Arc<GaussianEnsemble>> {
        self.ensemble.as_ref().ok_or(Error::Empty("model (not trained yet)"))
    }
}

impl ModelLearner for EnsembleLearner {
    fn train(&mut self, buffer: &[Transition], seed: u64) -> Result<()> {
        let cfg = TrainConfig {
            seed,
            ..self.cfg.clone()
        };
        let warm = if self.warm_start { self.ensemble.as_deref() } else { None };
        let out = train_ensemble(buffer, self.state_dim, self.action_dim, &cfg, warm)?;
        self.ensemble = Some(Arc::new(out.ensemble));
        self.version += 1;
        Ok(())
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn prediction_error(&self, slice: &[Transition]) -> Result<f64> {
        one_step_error(self.current()?, slice)
    }

    fn model_step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let e = self.current()?;
        if self.sample_members {
            let k = rng.gen_range(0..e.len());
            Ok(e.sample_member(k, state, action, rng))
        } else {
            Ok(e.predict_mean(state, action))
        }
    }

    fn make_policy(&self, oracle: &OracleSpec, env: &Arc<dyn Environment>) -> Result<Box<dyn Policy>> {
        let dynamics = Arc::new(EnsembleDynamics {
            ensemble: self.current()?.clone(),
            env: env.clone(),
        });
        let spec = OracleSpec {
            seed: rng::derive(oracle.seed, self.version),
            ..oracle.clone()
        };
        match optimize(OracleModel::Continuous(dynamics, ActionBounds::of(env.as_ref())), &spec)? {
            OraclePolicy::Planner(p) => Ok(Box::new(p)),
            OraclePolicy::Tabular { .. } => unreachable!("continuous models yield planners"),
        }
    }
}

/// Count-based model of a tabular environment. Rewards and discount come
/// from the environment; state-action pairs never visited get a uniform
/// next-state row.
pub struct TabularLearner {
    template: Arc<TabularMdp>,
    model: Option<TabularMdp>,
    version: u64,
}

impl TabularLearner {
    pub fn new(template: Arc<TabularMdp>) -> Self {
        Self {
            template,
            model: None,
            version: 0,
        }
    }

    pub fn model(&self) -> Option<&TabularMdp> {
        self.model.as_ref()
    }

    fn current(&self) -> Result<&TabularMdp> {
        self.model.as_ref().ok_or(Error::Empty("model (not trained yet)"))
    }

    fn indices(&self, state: &[f64], action: &[f64]) -> (usize, usize) {
        let s = TabularEnv::state_index(state);
        let a = action.first().copied().unwrap_or(0.0);
        let a = if a.is_nan() { 0 } else { (a.round().max(0.0) as usize).min(self.template.n_actions() - 1) };
        (s, a)
    }
}

impl ModelLearner for TabularLearner {
    fn train(&mut self, buffer: &[Transition], _seed: u64) -> Result<()> {
        let (n, na) = (self.template.n_states(), self.template.n_actions());
        let mut counts = vec![0u64; n * na * n];
        for t in buffer {
            if t.state.len() != n || t.next_state.len() != n {
                return Err(Error::Shape("transition is not a one-hot tabular state".into()));
            }
            let (s, a) = self.indices(&t.state, &t.action);
            counts[(s * na + a) * n + TabularEnv::state_index(&t.next_state)] += 1;
        }
        let mut transition = vec![0.0; n * na * n];
        for (row, c) in transition.chunks_mut(n).zip(counts.chunks(n)) {
            let total: u64 = c.iter().sum();
            if total == 0 {
                row.fill(1.0 / n as f64);
            } else {
                for (p, &k) in row.iter_mut().zip(c) {
                    *p = k as f64 / total as f64;
                }
            }
        }
        self.model = Some(self.template.with_transition(transition)?);
        self.version += 1;
        Ok(())
    }

    fn version(&self) -> u64 {
        self.version
    }

    /// Mean `‖e_{s'} − P̂(·|s,a)‖₁` over the slice.
    fn prediction_error(&self, slice: &[Transition]) -> Result<f64> {
        let m = self.current()?;
        if slice.is_empty() {
            return Err(Error::Empty("slice"));
        }
        let mut total = 0.0;
        for t in slice {
            let (s, a) = self.indices(&t.state, &t.action);
            let next = TabularEnv::state_index(&t.next_state);
            total += m
                .row(s, a)
                .iter()
                .enumerate()
                .map(|(j, p)| if j == next { (1.0 - p).abs() } else { p.abs() })
                .sum::<f64>();
        }
        Ok(total / slice.len() as f64)
    }

    fn model_step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let m = self.current()?;
        let (s, a) = self.indices(state, action);
        let mut out = vec![0.0; m.n_states()];
        out[categorical(rng, m.row(s, a))] = 1.0;
        Ok(out)
    }

    fn make_policy(&self, oracle: &OracleSpec, _env: &Arc<dyn Environment>) -> Result<Box<dyn Policy>> {
        match optimize(OracleModel::Tabular(self.current()?), oracle)? {
            OraclePolicy::Tabular { policy, .. } => Ok(Box::new(TabularAgent::new(policy))),
            OraclePolicy::Planner(_) => unreachable!("tabular models yield tabular policies"),
        }
    }
}

/// Linear ramp of the rollout length over environment steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRamp {
    pub from: usize,
    pub to: usize,
    pub over_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    /// Rollout length `h`.
    #[serde(default = "default_rollout_length")]
    pub length: usize,
    #[serde(default = "default_rollouts_per_update")]
    pub per_update: usize,
    /// Step through a random member's Gaussian instead of the ensemble mean.
    #[serde(default)]
    pub sample_members: bool,
    #[serde(default)]
    pub ramp: Option<RolloutRamp>,
}

fn default_rollout_length() -> usize {
    1
}
fn default_rollouts_per_update() -> usize {
    64
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            length: default_rollout_length(),
            per_update: default_rollouts_per_update(),
            sample_members: false,
            ramp: None,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.ramp.as_ref().is_some_and(|r| r.from == 0 || r.to == 0) {
            return Err(Error::invalid("rollout", "length must be >= 1"));
        }
        Ok(())
    }

    pub fn length_at(&self, step: u64) -> usize {
        match &self.ramp {
            None => self.length,
            Some(r) if r.over_steps == 0 || step >= r.over_steps => r.to,
            Some(r) => {
                let frac = step as f64 / r.over_steps as f64;
                (r.from as f64 + frac * (r.to as f64 - r.from as f64)).round() as usize
            }
        }
    }
}

/// `h`-step rollouts of the learned model from each start state. Rollouts
/// stop early at terminal states.
pub fn rollout_model(
    learner: &dyn ModelLearner,
    policy: &dyn Policy,
    env: &dyn Environment,
    starts: &[Vec<f64>],
    h: usize,
    rng: &mut Rng,
) -> Result<Vec<Transition>> {
    if starts.is_empty() {
        return Err(Error::Empty("rollout start set"));
    }
    let mut out = Vec::with_capacity(starts.len() * h);
    for s0 in starts {
        let mut x = s0.clone();
        for t in 0..h {
            let a = policy.rollout_action(&x, t, rng);
            let next = learner.model_step(&x, &a, rng)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure("model rollout".into()));
            }
            let reward = env.reward(&x, &a);
            let done = env.is_terminal(&next);
            out.push(Transition {
                state: x,
                action: a,
                next_state: next.clone(),
                reward,
            });
            if done {
                break;
            }
            x = next;
        }
    }
    Ok(out)
}

/// A model-buffer entry with the model version that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedTransition {
    pub transition: Transition,
    pub model_version: u64,
    pub created_step: u64,
}

/// `D_e`, `D_m` and the fresh slice `ΔD`, each FIFO-bounded.
#[derive(Debug, Clone)]
pub struct ReplayBuffers {
    env: VecDeque<Transition>,
    model: VecDeque<TaggedTransition>,
    fresh: Vec<Transition>,
    env_capacity: usize,
    model_capacity: usize,
}

impl ReplayBuffers {
    pub fn new(env_capacity: usize, model_capacity: usize) -> Self {
        Self {
            env: VecDeque::new(),
            model: VecDeque::new(),
            fresh: Vec::new(),
            env_capacity,
            model_capacity,
        }
    }

    pub fn push_env(&mut self, t: Transition) {
        if self.env.len() == self.env_capacity {
            self.env.pop_front();
        }
        self.fresh.push(t.clone());
        self.env.push_back(t);
    }

    pub fn push_model(&mut self, t: TaggedTransition) {
        if self.model_capacity == 0 {
            return;
        }
        if self.model.len() == self.model_capacity {
            self.model.pop_front();
        }
        self.model.push_back(t);
    }

    pub fn clear_fresh(&mut self) {
        self.fresh.clear();
    }

    pub fn env(&mut self) -> &[Transition] {
        self.env.make_contiguous()
    }

    pub fn env_len(&self) -> usize {
        self.env.len()
    }

    pub fn fresh(&self) -> &[Transition] {
        &self.fresh
    }

    pub fn model(&self) -> impl Iterator<Item = &TaggedTransition> {
        self.model.iter()
    }

    pub fn model_len(&self) -> usize {
        self.model.len()
    }

    pub fn env_states(&self) -> Vec<Vec<f64>> {
        self.env.iter().map(|t| t.state.clone()).collect()
    }
}

/// Everything a run needs besides the environment, learner and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub budget: u64,
    pub trigger: TriggerConfig,
    #[serde(default)]
    pub rollout: RolloutConfig,
    pub oracle: OracleSpec,
    #[serde(default)]
    pub model: TrainConfig,
    /// Continue training from the previous ensemble.
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default = "default_env_capacity")]
    pub env_capacity: usize,
    #[serde(default = "default_model_capacity")]
    pub model_capacity: usize,
    /// Equal segments of the budget used for coverage and error diagnostics.
    #[serde(default = "default_stages")]
    pub diagnostic_stages: usize,
}

fn default_true() -> bool {
    true
}
fn default_env_capacity() -> usize {
    1_000_000
}
fn default_model_capacity() -> usize {
    100_000
}
fn default_stages() -> usize {
    4
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.trigger.validate()?;
        self.rollout.validate()?;
        self.oracle.validate()?;
        self.model.validate()?;
        if self.env_capacity < self.trigger.t_max {
            return Err(Error::invalid("engine", "env_capacity must be at least t_max"));
        }
        if self.diagnostic_stages == 0 || self.diagnostic_stages > 10_000 {
            return Err(Error::invalid("engine", "diagnostic_stages must be in 1..=10000"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunMode {
    Cmlo,
    Fixed { interval: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub end_step: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub length: usize,
}

/// Coverage and mean prediction error over one segment of the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub end_step: u64,
    /// Hull area of every state in `D_e` at the segment end.
    pub coverage: Option<f64>,
    /// Mean estimated prediction error of the segment's estimations.
    pub pred_error: Option<f64>,
    pub n_estimates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub step: u64,
    pub message: String,
}

/// The outcome of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub manifest: RunManifest,
    pub episodes: Vec<EpisodeRecord>,
    pub estimates: Vec<EstimateRecord>,
    pub stages: Vec<StageRecord>,
}

/// Scalar results and the training schedule; stored as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    pub mode: RunMode,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub env_name: String,
    pub budget: u64,
    pub steps_taken: u64,
    pub training_steps: Vec<u64>,
    pub rollout_tuples: u64,
    pub env_buffer_len: usize,
    pub model_buffer_len: usize,
    /// `D_m` entries whose version tag disagrees with the model that was
    /// current at their creation step.
    pub stale_model_tuples: u64,
    pub trigger_failures: usize,
    pub failure: Option<RunFailure>,
}

impl RunRecord {
    pub fn training_count(&self) -> usize {
        self.manifest.training_steps.len()
    }

    /// Gaps between consecutive trainings (the first measured from step 0).
    pub fn interevent_times(&self) -> Vec<u64> {
        let mut prev = 0;
        self.manifest
            .training_steps
            .iter()
            .map(|&s| {
                let d = s - prev;
                prev = s;
                d
            })
            .collect()
    }

    /// Mean return of the last `n` completed episodes.
    pub fn final_mean_return(&self, n: usize) -> Option<f64> {
        let k = n.min(self.episodes.len());
        if k == 0 {
            return None;
        }
        Some(self.episodes[self.episodes.len() - k..].iter().map(|e| e.ret).sum::<f64>() / k as f64)
    }
}

fn estimate(
    learner: &dyn ModelLearner,
    buffers: &ReplayBuffers,
    sample_size: usize,
    hull_rng: &mut Rng,
) -> Result<ShiftEstimate> {
    let hull = coverage_volume(&buffers.env_states(), sample_size, hull_rng)?;
    let pred_error = learner.prediction_error(buffers.fresh())?;
    Ok(ShiftEstimate {
        volume: hull.volume,
        pred_error,
    })
}

/// Runs the loop with `cfg.trigger` as given.
pub fn run_cmlo(
    env: Arc<dyn Environment>,
    learner: &mut dyn ModelLearner,
    cfg: &EngineConfig,
    seed: u64,
) -> Result<RunRecord> {
    run_loop(env, learner, cfg, RunMode::Cmlo, seed)
}

/// The same loop with training forced every `k` steps.
pub fn run_fixed_interval(
    env: Arc<dyn Environment>,
    learner: &mut dyn ModelLearner,
    cfg: &EngineConfig,
    k: usize,
    seed: u64,
) -> Result<RunRecord> {
    if k == 0 {
        return Err(Error::invalid("interval", "must be >= 1"));
    }
    let cfg = EngineConfig {
        trigger: TriggerConfig {
            t_min: k,
            t_max: k,
            ..cfg.trigger.clone()
        },
        ..cfg.clone()
    };
    run_loop(env, learner, &cfg, RunMode::Fixed { interval: k }, seed)
}

fn run_loop(
    env: Arc<dyn Environment>,
    learner: &mut dyn ModelLearner,
    cfg: &EngineConfig,
    mode: RunMode,
    seed: u64,
) -> Result<RunRecord> {
    cfg.validate()?;
    if learner.version() != 0 {
        return Err(Error::invalid("learner", "must start untrained"));
    }
    let mut env_rng = rng::child(seed, 0);
    let mut policy_rng = rng::child(seed, 1);
    let mut hull_rng = rng::child(seed, 2);
    let mut rollout_rng = rng::child(seed, 3);
    let trig_cfg = &cfg.trigger;
    let horizon = env.spec().horizon;

    let mut buffers = ReplayBuffers::new(cfg.env_capacity, cfg.model_capacity);
    let mut policy: Box<dyn Policy> = Box::new(RandomPolicy::new(ActionBounds::of(env.as_ref())));
    let mut trigger = TriggerState::new(0.0);
    let mut episodes = Vec::new();
    let mut training_steps = Vec::new();
    let mut rollout_tuples = 0u64;
    let mut failure = None;

    let stage_ends: Vec<u64> = (1..=cfg.diagnostic_stages as u64)
        .map(|i| cfg.budget * i / cfg.diagnostic_stages as u64)
        .collect();
    let mut stages: Vec<StageRecord> = Vec::with_capacity(stage_ends.len());
    let mut stage_cursor = 0;
    // stages that end before any step carry no data
    while stage_cursor < stage_ends.len() && stage_ends[stage_cursor] == 0 {
        stages.push(StageRecord {
            stage: stage_cursor,
            end_step: 0,
            coverage: None,
            pred_error: None,
            n_estimates: 0,
        });
        stage_cursor += 1;
    }
    let mut stage_errors: Vec<f64> = Vec::new();

    let mut state = env.reset(&mut env_rng);
    let (mut ep_return, mut ep_len) = (0.0, 0usize);
    let mut steps_taken = 0;

    for step in 1..=cfg.budget {
        let outcome: Result<()> = (|| {
            let action = policy.act(&state, &mut policy_rng)?;
            let out = env.step(&state, &action, &mut env_rng);
            let (applied, _) = env.clip_action(&action);
            buffers.push_env(Transition {
                state: std::mem::take(&mut state),
                action: applied,
                next_state: out.next_state.clone(),
                reward: out.reward,
            });
            ep_return += out.reward;
            ep_len += 1;
            if out.done || ep_len >= horizon {
                episodes.push(EpisodeRecord {
                    episode: episodes.len(),
                    end_step: step,
                    ret: ep_return,
                    length: ep_len,
                });
                state = env.reset(&mut env_rng);
                policy.reset();
                ep_return = 0.0;
                ep_len = 0;
            } else {
                state = out.next_state;
            }

            trigger.steps_since_training += 1;
            let since = trigger.steps_since_training;
            let due = trig_cfg.estimation_due(since);
            let train_now = if learner.version() == 0 {
                since >= trig_cfg.t_min
            } else if due {
                let est = estimate(&*learner, &buffers, trig_cfg.hull_sample_size, &mut hull_rng);
                let decision = trigger_step(&mut trigger, trig_cfg, step, est);
                if let Some(r) = trigger.estimates_log.last() {
                    if r.pred_error.is_finite() {
                        stage_errors.push(r.pred_error);
                    }
                }
                decision == Decision::Train
            } else {
                false
            };

            if train_now {
                learner.train(buffers.env(), rng::derive(seed, 1000 + learner.version()))?;
                training_steps.push(step);
                buffers.clear_fresh();
                let base = coverage_volume(&buffers.env_states(), trig_cfg.hull_sample_size, &mut hull_rng)
                    .map(|h| h.volume)
                    .unwrap_or(0.0);
                trigger.reset(base);
                policy = learner.make_policy(&cfg.oracle, &env)?;
            }
            if learner.version() > 0 && (train_now || due) && cfg.rollout.per_update > 0 {
                let h = cfg.rollout.length_at(step);
                let n_env = buffers.env_len();
                let env_slice = buffers.env();
                let starts: Vec<Vec<f64>> = (0..cfg.rollout.per_update)
                    .map(|_| env_slice[rollout_rng.gen_range(0..n_env)].state.clone())
                    .collect();
                let tuples = rollout_model(&*learner, policy.as_ref(), env.as_ref(), &starts, h, &mut rollout_rng)?;
                rollout_tuples += tuples.len() as u64;
                let version = learner.version();
                for t in tuples {
                    buffers.push_model(TaggedTransition {
                        transition: t,
                        model_version: version,
                        created_step: step,
                    });
                }
            }
            Ok(())
        })();
        steps_taken = step;
        if let Err(e) = outcome {
            failure = Some(RunFailure {
                step,
                message: e.to_string(),
            });
            break;
        }

        while stage_cursor < stage_ends.len() && stage_ends[stage_cursor] == step {
            let coverage = coverage_volume(&buffers.env_states(), usize::MAX, &mut hull_rng)
                .ok()
                .map(|h| h.volume);
            let n_estimates = stage_errors.len();
            stages.push(StageRecord {
                stage: stage_cursor,
                end_step: step,
                coverage,
                pred_error: (n_estimates > 0).then(|| stage_errors.iter().sum::<f64>() / n_estimates as f64),
                n_estimates,
            });
            stage_errors.clear();
            stage_cursor += 1;
        }
    }

    let stale_model_tuples = buffers
        .model()
        .filter(|t| t.model_version != training_steps.iter().filter(|&&s| s <= t.created_step).count() as u64)
        .count() as u64;

    Ok(RunRecord {
        manifest: RunManifest {
            version: RECORD_VERSION,
            mode,
            seed,
            config_hash: String::new(),
            env_name: env.spec().name.clone(),
            budget: cfg.budget,
            steps_taken,
            training_steps,
            rollout_tuples,
            env_buffer_len: buffers.env_len(),
            model_buffer_len: buffers.model_len(),
            stale_model_tuples,
            trigger_failures: trigger.failures,
            failure,
        },
        episodes,
        estimates: trigger.estimates_log,
        stages,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RETURNS_FILE: &str = "returns.csv";
pub const TRIGGERS_FILE: &str = "triggers.csv";
pub const COVERAGE_FILE: &str = "coverage.csv";
pub const MODEL_ERROR_FILE: &str = "model_error.csv";

#[derive(Debug, Serialize, Deserialize)]
struct CoverageRow {
    stage: usize,
    end_step: u64,
    coverage: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelErrorRow {
    stage: usize,
    end_step: u64,
    pred_error: Option<f64>,
    n_estimates: usize,
}

fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(r: R, header: &[&str], what: &'static str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(r);
    if r.headers()?.iter().ne(header.iter().copied()) {
        return Err(Error::invalid(what, "unexpected header"));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

const RETURNS_HEADER: [&str; 4] = ["episode", "end_step", "return", "length"];
const COVERAGE_HEADER: [&str; 3] = ["stage", "end_step", "coverage"];
const MODEL_ERROR_HEADER: [&str; 4] = ["stage", "end_step", "pred_error", "n_estimates"];

impl RunRecord {
    /// Writes the manifest and the four CSV traces into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        write_rows(fs::File::create(dir.join(RETURNS_FILE))?, &self.episodes, &RETURNS_HEADER)?;
        write_trace_csv(fs::File::create(dir.join(TRIGGERS_FILE))?, &self.estimates)?;
        let cov: Vec<CoverageRow> = self
            .stages
            .iter()
            .map(|s| CoverageRow {
                stage: s.stage,
                end_step: s.end_step,
                coverage: s.coverage,
            })
            .collect();
        write_rows(fs::File::create(dir.join(COVERAGE_FILE))?, &cov, &COVERAGE_HEADER)?;
        let err: Vec<ModelErrorRow> = self
            .stages
            .iter()
            .map(|s| ModelErrorRow {
                stage: s.stage,
                end_step: s.end_step,
                pred_error: s.pred_error,
                n_estimates: s.n_estimates,
            })
            .collect();
        write_rows(fs::File::create(dir.join(MODEL_ERROR_FILE))?, &err, &MODEL_ERROR_HEADER)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest = parse_manifest(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let episodes = read_returns_csv(fs::File::open(dir.join(RETURNS_FILE))?)?;
        let estimates = read_trace_csv(fs::File::open(dir.join(TRIGGERS_FILE))?)?;
        let stages = read_stage_csvs(
            fs::File::open(dir.join(COVERAGE_FILE))?,
            fs::File::open(dir.join(MODEL_ERROR_FILE))?,
        )?;
        Ok(Self {
            manifest,
            episodes,
            estimates,
            stages,
        })
    }
}

pub fn read_returns_csv<R: Read>(r: R) -> Result<Vec<EpisodeRecord>> {
    read_rows(r, &RETURNS_HEADER, "returns csv")
}

/// Joins `coverage.csv` and `model_error.csv` into stage records.
pub fn read_stage_csvs<R1: Read, R2: Read>(coverage: R1, model_error: R2) -> Result<Vec<StageRecord>> {
    let cov: Vec<CoverageRow> = read_rows(coverage, &COVERAGE_HEADER, "coverage csv")?;
    let err: Vec<ModelErrorRow> = read_rows(model_error, &MODEL_ERROR_HEADER, "model error csv")?;
    if cov.len() != err.len() || cov.iter().zip(&err).any(|(c, e)| c.stage != e.stage || c.end_step != e.end_step) {
        return Err(Error::invalid("run directory", "coverage and model error stages disagree"));
    }
    Ok(cov
        .into_iter()
        .zip(err)
        .map(|(c, e)| StageRecord {
            stage: c.stage,
            end_step: c.end_step,
            coverage: c.coverage,
            pred_error: e.pred_error,
            n_estimates: e.n_estimates,
        })
        .collect())
}

/// Parses and version-checks a run manifest.
pub fn parse_manifest(text: &str) -> Result<RunManifest> {
    let m: RunManifest = serde_json::from_str(text)?;
    if m.version != RECORD_VERSION {
        return Err(Error::invalid("manifest", format!("unsupported version {}", m.version)));
    }
    if m.training_steps.windows(2).any(|w| w[1] <= w[0]) || m.training_steps.last().is_some_and(|&s| s > m.steps_taken)
    {
        return Err(Error::invalid("manifest", "training steps must increase and lie within the run"));
    }
    if m.steps_taken > m.budget {
        return Err(Error::invalid("manifest", "steps_taken exceeds budget"));
    }
    Ok(m)
}
