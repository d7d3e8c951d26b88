//! Ground-truth environments.
//!
//! Tabular generators and the generative sampler feed the bound suite;
//! the pendulum and cart-pole are the continuous tasks the engine learns
//! models of. Continuous dynamics are deterministic.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{EvalContext, TabularMdp};
use crate::rng::{self, Rng};

/// Random tabular MDP. Each transition row is Dirichlet(1, ..., 1) over a
/// random support of `ceil(sparsity · n_states)` next states; rewards are
/// uniform in `[-1, 1]` with bound `R = 1`.
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    sparsity: f64,
    seed: u64,
) -> Result<TabularMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::invalid("random mdp", "counts must be positive"));
    }
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::invalid("sparsity", format!("{sparsity} not in (0, 1]")));
    }
    let mut rng = rng::seeded(seed);
    let support = ((sparsity * n_states as f64).ceil() as usize).clamp(1, n_states);
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transition.extend(dirichlet_row(&mut rng, n_states, support));
    }
    let reward = (0..n_states * n_actions)
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    TabularMdp::new(n_states, n_actions, transition, reward, gamma, 1.0)
}

fn dirichlet_row(rng: &mut Rng, n: usize, support: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..n).collect();
    let chosen = if support < n {
        let (head, _) = idx.partial_shuffle(rng, support);
        head.to_vec()
    } else {
        idx
    };
    let mut row = vec![0.0; n];
    for &j in &chosen {
        let g: f64 = Exp1.sample(rng);
        row[j] = g.max(f64::MIN_POSITIVE);
    }
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= sum);
    let resid = 1.0 - row.iter().sum::<f64>();
    let k = chosen[0];
    row[k] += resid;
    row
}

/// Deterministic-with-slip chain: action 0 moves left, action 1 right;
/// with probability `slip` the agent stays. Reward 1 in the last state.
pub fn chain_mdp(n_states: usize, gamma: f64, slip: f64) -> Result<TabularMdp> {
    if n_states < 2 || !(0.0..=1.0).contains(&slip) {
        return Err(Error::invalid("chain", "need >= 2 states and slip in [0, 1]"));
    }
    let mut t = vec![0.0; n_states * 2 * n_states];
    for s in 0..n_states {
        for a in 0..2 {
            let to = if a == 0 { s.saturating_sub(1) } else { (s + 1).min(n_states - 1) };
            let base = (s * 2 + a) * n_states;
            t[base + to] += 1.0 - slip;
            t[base + s] += slip;
        }
    }
    let mut r = vec![0.0; n_states * 2];
    r[(n_states - 1) * 2] = 1.0;
    r[(n_states - 1) * 2 + 1] = 1.0;
    TabularMdp::new(n_states, 2, t, r, gamma, 1.0)
}

/// `width × height` gridworld with actions up/right/down/left, walls at the
/// border and a rewarding goal in the far corner. Moves slip to a uniformly
/// random direction with probability `slip`.
pub fn gridworld_mdp(width: usize, height: usize, gamma: f64, slip: f64) -> Result<TabularMdp> {
    if width == 0 || height == 0 || !(0.0..=1.0).contains(&slip) {
        return Err(Error::invalid("gridworld", "empty grid or bad slip"));
    }
    let n = width * height;
    let moves: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
    let target = |s: usize, m: usize| -> usize {
        let (x, y) = ((s % width) as i64, (s / width) as i64);
        let (nx, ny) = (x + moves[m].0, y + moves[m].1);
        if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
            s
        } else {
            ny as usize * width + nx as usize
        }
    };
    let mut t = vec![0.0; n * 4 * n];
    for s in 0..n {
        for a in 0..4 {
            let base = (s * 4 + a) * n;
            t[base + target(s, a)] += 1.0 - slip;
            for m in 0..4 {
                t[base + target(s, m)] += slip / 4.0;
            }
        }
    }
    let mut r = vec![0.0; n * 4];
    for a in 0..4 {
        r[(n - 1) * 4 + a] = 1.0;
    }
    TabularMdp::new(n, 4, t, r, gamma, 1.0)
}

/// I.i.d. next-state draws for any queried pair of a true MDP.
#[derive(Debug, Clone)]
pub struct GenerativeSampler {
    mdp: Arc<TabularMdp>,
    rng: Rng,
}

impl GenerativeSampler {
    pub fn new(mdp: Arc<TabularMdp>, seed: u64) -> Self {
        Self {
            mdp,
            rng: rng::seeded(seed),
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    /// Next-state counts of `n` draws from `P(· | s, a)`.
    pub fn draw(&mut self, s: usize, a: usize, n: u64) -> Result<Vec<u64>> {
        if s >= self.mdp.n_states() || a >= self.mdp.n_actions() {
            return Err(Error::invalid("state-action pair", format!("({s}, {a})")));
        }
        if n == 0 {
            return Err(Error::invalid("draw count", "must be at least 1"));
        }
        let row = self.mdp.row(s, a);
        let mut counts = vec![0u64; row.len()];
        for _ in 0..n {
            counts[categorical(&mut self.rng, row)] += 1;
        }
        Ok(counts)
    }

    /// Counts tensor `(s, a, s')` with `n` draws per pair.
    pub fn draw_all(&mut self, n: u64) -> Result<Vec<u64>> {
        let mut all = Vec::with_capacity(self.mdp.transition().len());
        for s in 0..self.mdp.n_states() {
            for a in 0..self.mdp.n_actions() {
                all.extend(self.draw(s, a, n)?);
            }
        }
        Ok(all)
    }
}

/// Inverse-CDF categorical draw.
pub fn categorical(rng: &mut Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the total mass; fall back to the last support point.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Constants, bounds and termination of an environment. Stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: String,
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    pub terminal: String,
    pub reward_bound: f64,
    pub gamma: f64,
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Pendulum,
    Cartpole,
    /// Random tabular MDP with one-hot state observations; constants
    /// `n_states`, `n_actions`, `sparsity`, `seed`.
    TabularRandom,
}

impl EnvSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: EnvSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("env spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("env spec", "horizon must be >= 1"));
        }
        if !(self.reward_bound >= 0.0) {
            return Err(Error::invalid("env spec", "reward bound must be >= 0"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid("env spec", "gamma must lie in (0, 1)"));
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(Error::invalid("env spec", "action bounds must match action_dim"));
        }
        if self
            .action_low
            .iter()
            .zip(&self.action_high)
            .any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite())
        {
            return Err(Error::invalid("env spec", "action_low must be <= action_high"));
        }
        if self.constants.values().any(|v| !v.is_finite()) {
            return Err(Error::invalid("env spec", "constants must be finite"));
        }
        Ok(())
    }

    fn constant(&self, key: &str) -> Result<f64> {
        self.constants
            .get(key)
            .copied()
            .ok_or_else(|| Error::invalid("env spec", format!("missing constant `{key}`")))
    }

    pub fn pendulum_default() -> Self {
        let constants = [
            ("g", 10.0),
            ("l", 1.0),
            ("m", 1.0),
            ("dt", 0.05),
            ("max_speed", 8.0),
        ];
        let u_max = 2.0;
        EnvSpec {
            name: "pendulum".into(),
            kind: EnvKind::Pendulum,
            state_dim: 2,
            action_dim: 1,
            action_low: vec![-u_max],
            action_high: vec![u_max],
            horizon: 200,
            terminal: "never".into(),
            reward_bound: PI * PI + 0.1 * 64.0 + 0.001 * u_max * u_max,
            gamma: 0.99,
            constants: constants.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn cartpole_default() -> Self {
        let constants = [
            ("g", 9.8),
            ("mass_cart", 1.0),
            ("mass_pole", 0.1),
            ("half_length", 0.5),
            ("dt", 0.02),
            ("theta_limit", 0.21),
            ("x_limit", 2.4),
        ];
        EnvSpec {
            name: "cartpole".into(),
            kind: EnvKind::Cartpole,
            state_dim: 4,
            action_dim: 1,
            action_low: vec![-10.0],
            action_high: vec![10.0],
            horizon: 200,
            terminal: "|theta| > theta_limit or |x| > x_limit".into(),
            reward_bound: 1.0,
            gamma: 0.99,
            constants: constants.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Environment>> {
        self.validate()?;
        Ok(match self.kind {
            EnvKind::Pendulum => Arc::new(Pendulum::from_spec(self.clone())?),
            EnvKind::Cartpole => Arc::new(CartPole::from_spec(self.clone())?),
            EnvKind::TabularRandom => Arc::new(TabularEnv::from_spec(self.clone())?),
        })
    }
}

/// Outcome of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// The action was outside its bounds and got clipped.
    pub clipped: bool,
}

/// Episodic environment with vector states and actions. The RNG is only
/// consulted by stochastic environments.
pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;
    fn reset(&self, rng: &mut Rng) -> Vec<f64>;
    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Step;
    /// Known reward function, available to planners.
    fn reward(&self, state: &[f64], action: &[f64]) -> f64;
    fn is_terminal(&self, state: &[f64]) -> bool;
    /// State coordinates that are angles in `(-π, π]`.
    fn angle_dims(&self) -> Vec<usize> {
        Vec::new()
    }

    fn clip_action(&self, action: &[f64]) -> (Vec<f64>, bool) {
        clip_to(action, &self.spec().action_low, &self.spec().action_high)
    }
}

pub fn clip_to(action: &[f64], low: &[f64], high: &[f64]) -> (Vec<f64>, bool) {
    let mut clipped = false;
    let out = action
        .iter()
        .zip(low.iter().zip(high))
        .map(|(&a, (&l, &h))| {
            let c = if a.is_nan() { 0.0_f64.clamp(l, h) } else { a.clamp(l, h) };
            if c != a {
                clipped = true;
            }
            c
        })
        .collect();
    (out, clipped)
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut t = (theta + PI).rem_euclid(two_pi) - PI;
    if t <= -PI {
        t += two_pi;
    }
    t
}

/// Pendulum with `θ = 0` upright: `θ̈ = (g/l) sin θ + u/(m l²)`, integrated
/// by semi-implicit Euler.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    g: f64,
    l: f64,
    m: f64,
    dt: f64,
    max_speed: f64,
}

impl Pendulum {
    pub fn from_spec(spec: EnvSpec) -> Result<Self> {
        if spec.state_dim != 2 || spec.action_dim != 1 {
            return Err(Error::invalid("pendulum spec", "state_dim 2, action_dim 1"));
        }
        Ok(Self {
            g: spec.constant("g")?,
            l: spec.constant("l")?,
            m: spec.constant("m")?,
            dt: spec.constant("dt")?,
            max_speed: spec.constants.get("max_speed").copied().unwrap_or(f64::INFINITY),
            spec,
        })
    }

    pub fn new() -> Self {
        Self::from_spec(EnvSpec::pendulum_default()).expect("default spec is valid")
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `θ̈` at the given angle and torque.
    pub fn acceleration(&self, theta: f64, u: f64) -> f64 {
        (self.g / self.l) * theta.sin() + u / (self.m * self.l * self.l)
    }

    /// Mechanical energy with `θ = 0` at the top.
    pub fn energy(&self, theta: f64, theta_dot: f64) -> f64 {
        0.5 * self.m * self.l * self.l * theta_dot * theta_dot + self.m * self.g * self.l * theta.cos()
    }

    pub fn step_raw(&self, state: &[f64], u: f64) -> Vec<f64> {
        let (theta, theta_dot) = (state[0], state[1]);
        let new_dot = (theta_dot + self.dt * self.acceleration(theta, u))
            .clamp(-self.max_speed, self.max_speed);
        let new_theta = wrap_angle(theta + self.dt * new_dot);
        vec![new_theta, new_dot]
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

pub fn pendulum_reward(state: &[f64], u: f64) -> f64 {
    let th = wrap_angle(state[0]);
    -(th * th + 0.1 * state[1] * state[1] + 0.001 * u * u)
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        vec![rng.gen_range(-PI..PI), rng.gen_range(-1.0..1.0)]
    }

    fn step(&self, state: &[f64], action: &[f64], _rng: &mut Rng) -> Step {
        let (a, clipped) = self.clip_action(action);
        let reward = pendulum_reward(state, a[0]);
        Step {
            next_state: self.step_raw(state, a[0]),
            reward,
            done: false,
            clipped,
        }
    }

    /// Defined for any torque; agrees with [`Environment::step`] inside the
    /// bounds.
    fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        pendulum_reward(state, action[0])
    }

    fn is_terminal(&self, _state: &[f64]) -> bool {
        false
    }

    fn angle_dims(&self) -> Vec<usize> {
        vec![0]
    }
}

/// Classic cart-pole, state `(x, ẋ, θ, θ̇)`, semi-implicit Euler.
#[derive(Debug, Clone)]
pub struct CartPole {
    spec: EnvSpec,
    g: f64,
    mass_cart: f64,
    mass_pole: f64,
    half_length: f64,
    dt: f64,
    theta_limit: f64,
    x_limit: f64,
}

impl CartPole {
    pub fn from_spec(spec: EnvSpec) -> Result<Self> {
        if spec.state_dim != 4 || spec.action_dim != 1 {
            return Err(Error::invalid("cartpole spec", "state_dim 4, action_dim 1"));
        }
        Ok(Self {
            g: spec.constant("g")?,
            mass_cart: spec.constant("mass_cart")?,
            mass_pole: spec.constant("mass_pole")?,
            half_length: spec.constant("half_length")?,
            dt: spec.constant("dt")?,
            theta_limit: spec.constant("theta_limit")?,
            x_limit: spec.constant("x_limit")?,
            spec,
        })
    }

    pub fn new() -> Self {
        Self::from_spec(EnvSpec::cartpole_default()).expect("default spec is valid")
    }

    pub fn step_raw(&self, s: &[f64], force: f64) -> Vec<f64> {
        let (x, x_dot, th, th_dot) = (s[0], s[1], s[2], s[3]);
        let total = self.mass_cart + self.mass_pole;
        let pml = self.mass_pole * self.half_length;
        let (sin, cos) = th.sin_cos();
        let temp = (force + pml * th_dot * th_dot * sin) / total;
        let th_acc = (self.g * sin - cos * temp)
            / (self.half_length * (4.0 / 3.0 - self.mass_pole * cos * cos / total));
        let x_acc = temp - pml * th_acc * cos / total;
        let x_dot = x_dot + self.dt * x_acc;
        let th_dot = th_dot + self.dt * th_acc;
        vec![x + self.dt * x_dot, x_dot, th + self.dt * th_dot, th_dot]
    }
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for CartPole {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        (0..4).map(|_| rng.gen_range(-0.05..0.05)).collect()
    }

    fn step(&self, state: &[f64], action: &[f64], _rng: &mut Rng) -> Step {
        let (a, clipped) = self.clip_action(action);
        let next_state = self.step_raw(state, a[0]);
        let done = self.is_terminal(&next_state);
        Step {
            next_state,
            reward: 1.0,
            done,
            clipped,
        }
    }

    fn reward(&self, state: &[f64], _action: &[f64]) -> f64 {
        if self.is_terminal(state) {
            0.0
        } else {
            1.0
        }
    }

    fn is_terminal(&self, s: &[f64]) -> bool {
        s[2].abs() > self.theta_limit || s[0].abs() > self.x_limit
    }
}

/// A tabular MDP seen through vector observations: the state is one-hot,
/// the action is its index rounded from the first action coordinate.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    spec: EnvSpec,
    mdp: Arc<TabularMdp>,
    start: EvalContext,
}

impl TabularEnv {
    pub fn new(mdp: Arc<TabularMdp>, start: EvalContext, horizon: usize) -> Self {
        let spec = EnvSpec {
            name: "tabular".into(),
            kind: EnvKind::TabularRandom,
            state_dim: mdp.n_states(),
            action_dim: 1,
            action_low: vec![0.0],
            action_high: vec![(mdp.n_actions() - 1) as f64],
            horizon,
            terminal: "never".into(),
            reward_bound: mdp.reward_bound(),
            gamma: mdp.gamma(),
            constants: BTreeMap::new(),
        };
        Self { spec, mdp, start }
    }

    /// Largest tabular instance a spec file may request.
    pub const MAX_CELLS: f64 = 4e6;

    pub fn from_spec(spec: EnvSpec) -> Result<Self> {
        let n_states = spec.constant("n_states")?;
        let n_actions = spec.constant("n_actions")?;
        if !(n_states >= 1.0 && n_actions >= 1.0) || n_states * n_states * n_actions > Self::MAX_CELLS {
            return Err(Error::invalid("env spec", "n_states and n_actions must be >= 1 and the model small enough"));
        }
        let (n_states, n_actions) = (n_states as usize, n_actions as usize);
        let sparsity = spec.constants.get("sparsity").copied().unwrap_or(1.0);
        let seed = spec.constants.get("seed").copied().unwrap_or(0.0) as u64;
        let mdp = random_mdp(n_states, n_actions, spec.gamma, sparsity, seed)?;
        let mut env = Self::new(Arc::new(mdp), EvalContext::uniform(n_states), spec.horizon);
        env.spec.name = spec.name;
        Ok(env)
    }

    pub fn mdp(&self) -> &Arc<TabularMdp> {
        &self.mdp
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.mdp.n_states()];
        v[s] = 1.0;
        v
    }

    pub fn state_index(state: &[f64]) -> usize {
        state
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }

    pub fn action_index(&self, action: &[f64]) -> usize {
        let a = action.first().copied().unwrap_or(0.0);
        if a.is_nan() {
            return 0;
        }
        (a.round().max(0.0) as usize).min(self.mdp.n_actions() - 1)
    }
}

impl Environment for TabularEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        self.one_hot(categorical(rng, self.start.initial_dist()))
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Step {
        let s = Self::state_index(state);
        let (clamped, clipped) = self.clip_action(action);
        let a = self.action_index(&clamped);
        let next = categorical(rng, self.mdp.row(s, a));
        Step {
            next_state: self.one_hot(next),
            reward: self.mdp.reward(s, a),
            done: false,
            clipped,
        }
    }

    fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        self.mdp
            .reward(Self::state_index(state), self.action_index(action))
    }

    fn is_terminal(&self, _state: &[f64]) -> bool {
        false
    }
}

/// One row of an exported trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Writes `t, s0.., a0.., reward, done` rows.
pub fn write_trajectory_csv<W: Write>(out: W, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = rows.first() {
        let mut header = vec!["t".to_string()];
        header.extend((0..first.state.len()).map(|i| format!("s{i}")));
        header.extend((0..first.action.len()).map(|i| format!("a{i}")));
        header.push("reward".into());
        header.push("done".into());
        w.write_record(&header)?;
    }
    for r in rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.state.iter().map(|x| x.to_string()));
        rec.extend(r.action.iter().map(|x| x.to_string()));
        rec.push(r.reward.to_string());
        rec.push(r.done.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
