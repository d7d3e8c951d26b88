//! Policy-optimization oracles.
//!
//! An oracle takes a model and returns a policy that is near-optimal inside
//! that model. Tabular models get exact value iteration with a certified
//! suboptimality bound. Continuous models get one of two receding-horizon
//! planners (cross-entropy MPC or iLQR); neither carries a certificate.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{wrap_angle, Environment};
use crate::error::{Error, Result};
use crate::mdp::{value_iteration_capped, TabularMdp, TabularPolicy, DEFAULT_VI_CAP};
use crate::nn::GaussianEnsemble;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    ValueIteration,
    CemMpc,
    Ilqr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub kind: OracleKind,
    /// Sup-norm residual for value iteration; relative cost improvement at
    /// which iLQR stops.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_population")]
    pub population: usize,
    #[serde(default = "default_elites")]
    pub elites: usize,
    /// CEM refits.
    #[serde(default = "default_cem_iterations")]
    pub iterations: usize,
    /// iLQR iteration cap.
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Environment steps between replans; the plan (and its feedback gains
    /// for iLQR) is followed in between.
    #[serde(default = "default_replan")]
    pub replan_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_tolerance() -> f64 {
    1e-8
}
fn default_horizon() -> usize {
    15
}
fn default_population() -> usize {
    200
}
fn default_elites() -> usize {
    20
}
fn default_cem_iterations() -> usize {
    5
}
fn default_max_iterations() -> usize {
    50
}
fn default_replan() -> usize {
    1
}

impl OracleSpec {
    pub fn new(kind: OracleKind) -> Self {
        Self {
            kind,
            tolerance: default_tolerance(),
            horizon: default_horizon(),
            population: default_population(),
            elites: default_elites(),
            iterations: default_cem_iterations(),
            max_iterations: default_max_iterations(),
            replan_every: default_replan(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::invalid("oracle", "tolerance must be positive"));
        }
        if self.horizon == 0 || self.replan_every == 0 {
            return Err(Error::invalid("oracle", "horizon and replan_every must be >= 1"));
        }
        if self.horizon > 10_000 || self.population > 1_000_000 {
            return Err(Error::invalid("oracle", "horizon or population too large"));
        }
        if self.kind == OracleKind::CemMpc
            && (self.population == 0 || self.elites == 0 || self.elites > self.population || self.iterations == 0)
        {
            return Err(Error::invalid("oracle", "need 1 <= elites <= population and iterations >= 1"));
        }
        Ok(())
    }
}

/// A deterministic model planners can query.
pub trait DynamicsModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn next_state(&self, state: &[f64], action: &[f64]) -> Vec<f64>;
    fn reward(&self, state: &[f64], action: &[f64]) -> f64;
    fn terminal_reward(&self, _state: &[f64]) -> f64 {
        0.0
    }
    fn is_terminal(&self, _state: &[f64]) -> bool {
        false
    }
    fn angle_dims(&self) -> &[usize] {
        &[]
    }
    /// Exact `(∂f/∂x, ∂f/∂u)` when the model can supply them; planners
    /// fall back to finite differences otherwise.
    fn jacobians(&self, _state: &[f64], _action: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }
}

/// Learned transitions, environment rewards and termination.
pub struct EnsembleDynamics {
    pub ensemble: Arc<GaussianEnsemble>,
    pub env: Arc<dyn Environment>,
}

impl DynamicsModel for EnsembleDynamics {
    fn state_dim(&self) -> usize {
        self.ensemble.state_dim()
    }
    fn action_dim(&self) -> usize {
        self.ensemble.action_dim()
    }
    fn next_state(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        self.ensemble.predict_mean(state, action)
    }
    fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        self.env.reward(state, action)
    }
    fn is_terminal(&self, state: &[f64]) -> bool {
        self.env.is_terminal(state)
    }
    fn angle_dims(&self) -> &[usize] {
        self.ensemble.angle_dims()
    }
    fn jacobians(&self, state: &[f64], action: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let (n, m) = (state.len(), action.len());
        let (_, jac) = self.ensemble.predict_mean_jacobian(state, action);
        let full = DMatrix::from_row_slice(n, n + m, &jac);
        Some((full.columns(0, n).into_owned(), full.columns(n, m).into_owned()))
    }
}

/// The true dynamics of a deterministic environment.
pub struct EnvDynamics {
    env: Arc<dyn Environment>,
    angle_dims: Vec<usize>,
}

impl EnvDynamics {
    pub fn new(env: Arc<dyn Environment>) -> Self {
        let angle_dims = env.angle_dims();
        Self { env, angle_dims }
    }
}

impl DynamicsModel for EnvDynamics {
    fn state_dim(&self) -> usize {
        self.env.spec().state_dim
    }
    fn action_dim(&self) -> usize {
        self.env.spec().action_dim
    }
    fn next_state(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        // deterministic environments ignore the stream
        self.env.step(state, action, &mut rng::seeded(0)).next_state
    }
    fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        self.env.reward(state, action)
    }
    fn is_terminal(&self, state: &[f64]) -> bool {
        self.env.is_terminal(state)
    }
    fn angle_dims(&self) -> &[usize] {
        &self.angle_dims
    }
}

/// Box constraint on actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBounds {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.iter().zip(&high).any(|(l, h)| !(l <= h)) {
            return Err(Error::invalid("action bounds", "need low <= high per coordinate"));
        }
        Ok(Self { low, high })
    }

    pub fn of(env: &dyn Environment) -> Self {
        Self {
            low: env.spec().action_low.clone(),
            high: env.spec().action_high.clone(),
        }
    }

    pub fn clamp(&self, a: &mut [f64]) {
        for ((x, l), h) in a.iter_mut().zip(&self.low).zip(&self.high) {
            *x = if x.is_nan() { 0.0f64.clamp(*l, *h) } else { x.clamp(*l, *h) };
        }
    }

    fn center(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }
}

fn state_diff(a: &[f64], b: &[f64], angles: &[usize]) -> Vec<f64> {
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    for &i in angles {
        d[i] = wrap_angle(d[i]);
    }
    d
}

/// Undiscounted model return of an action sequence from `x0`; rewards stop
/// once a terminal state is reached.
pub fn sequence_return(model: &dyn DynamicsModel, x0: &[f64], controls: &[Vec<f64>]) -> f64 {
    let mut x = x0.to_vec();
    let mut total = 0.0;
    for u in controls {
        if model.is_terminal(&x) {
            return total;
        }
        total += model.reward(&x, u);
        x = model.next_state(&x, u);
    }
    if !model.is_terminal(&x) {
        total += model.terminal_reward(&x);
    }
    total
}

/// Output of [`cem_plan`].
#[derive(Debug, Clone, PartialEq)]
pub struct CemPlan {
    /// Final sampling mean, clipped to the bounds.
    pub controls: Vec<Vec<f64>>,
    /// Best elite score after each iteration.
    pub best_scores: Vec<f64>,
    pub best_sequence: Vec<Vec<f64>>,
}

/// Cross-entropy planning: sample action sequences from a diagonal
/// Gaussian, score them on the model, refit to the elites. The best
/// sequence so far is carried into every later population.
pub fn cem_plan(
    model: &dyn DynamicsModel,
    x0: &[f64],
    spec: &OracleSpec,
    bounds: &ActionBounds,
    init_mean: Option<&[Vec<f64>]>,
    rng: &mut Rng,
) -> Result<CemPlan> {
    spec.validate()?;
    let (h, m) = (spec.horizon, model.action_dim());
    if bounds.low.len() != m || x0.len() != model.state_dim() {
        return Err(Error::Shape("planner state or action dimension".into()));
    }
    let mut mean: Vec<Vec<f64>> = match init_mean {
        Some(init) if init.len() == h => init.to_vec(),
        _ => vec![bounds.center(); h],
    };
    let mut std: Vec<Vec<f64>> = vec![bounds.low.iter().zip(&bounds.high).map(|(l, h)| 0.5 * (h - l)).collect(); h];
    let mut best: Option<(Vec<Vec<f64>>, f64)> = None;
    let mut best_scores = Vec::with_capacity(spec.iterations);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..spec.iterations {
        let mut pop: Vec<Vec<Vec<f64>>> = (0..spec.population)
            .map(|_| {
                (0..h)
                    .map(|t| {
                        let mut a: Vec<f64> = (0..m)
                            .map(|j| mean[t][j] + std[t][j] * std_normal.sample(rng))
                            .collect();
                        bounds.clamp(&mut a);
                        a
                    })
                    .collect()
            })
            .collect();
        if let Some((seq, _)) = &best {
            pop[0] = seq.clone();
        }
        let scores: Vec<f64> = pop
            .par_iter()
            .map(|seq| {
                let s = sequence_return(model, x0, seq);
                if s.is_finite() {
                    s
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        if scores[order[0]] == f64::NEG_INFINITY {
            return Err(Error::PlannerFailure("every CEM candidate scored non-finite".into()));
        }
        let elites = &order[..spec.elites];
        let k = elites.len() as f64;
        for t in 0..h {
            for j in 0..m {
                let mu = elites.iter().map(|&e| pop[e][t][j]).sum::<f64>() / k;
                let var = elites.iter().map(|&e| (pop[e][t][j] - mu).powi(2)).sum::<f64>() / k;
                mean[t][j] = mu;
                std[t][j] = var.sqrt();
            }
        }
        let top = order[0];
        if best.as_ref().is_none_or(|(_, s)| scores[top] > *s) {
            best = Some((pop[top].clone(), scores[top]));
        }
        best_scores.push(best.as_ref().expect("set above").1);
    }
    let mut controls = mean;
    controls.iter_mut().for_each(|a| bounds.clamp(a));
    Ok(CemPlan {
        controls,
        best_scores,
        best_sequence: best.expect("iterations >= 1").0,
    })
}

/// Output of [`ilqr_plan`].
#[derive(Debug, Clone)]
pub struct IlqrPlan {
    pub controls: Vec<Vec<f64>>,
    /// Nominal states `x_0 .. x_H`.
    pub states: Vec<Vec<f64>>,
    /// Feedback gains `u_t = ū_t + K_t (x_t − x̄_t)`.
    pub gains: Vec<DMatrix<f64>>,
    /// Total cost `−return` of the nominal trajectory.
    pub cost: f64,
    pub iterations: usize,
}

struct Linearization {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    lx: DVector<f64>,
    lu: DVector<f64>,
    lxx: DMatrix<f64>,
    luu: DMatrix<f64>,
    lux: DMatrix<f64>,
}

const FD_STEP: f64 = 1e-6;
const FD_GRAD_STEP: f64 = 1e-5;
const FD_HESS_STEP: f64 = 1e-4;

/// Forward-difference Jacobians of the dynamics.
fn dynamics_jacobians(model: &dyn DynamicsModel, x: &[f64], u: &[f64], fx: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (x.len(), u.len());
    let angles = model.angle_dims();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut xp = x.to_vec();
    for j in 0..n {
        xp[j] += FD_STEP;
        let d = state_diff(&model.next_state(&xp, u), fx, angles);
        for i in 0..n {
            a[(i, j)] = d[i] / FD_STEP;
        }
        xp[j] = x[j];
    }
    let mut up = u.to_vec();
    for j in 0..m {
        up[j] += FD_STEP;
        let d = state_diff(&model.next_state(x, &up), fx, angles);
        for i in 0..n {
            b[(i, j)] = d[i] / FD_STEP;
        }
        up[j] = u[j];
    }
    (a, b)
}

/// Central-difference gradient and Hessian of `c` at `z`.
fn cost_derivatives(c: &dyn Fn(&[f64]) -> f64, z: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let d = z.len();
    let mut g = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    let mut w = z.to_vec();
    for i in 0..d {
        w[i] = z[i] + FD_GRAD_STEP;
        let p = c(&w);
        w[i] = z[i] - FD_GRAD_STEP;
        let q = c(&w);
        w[i] = z[i];
        g[i] = (p - q) / (2.0 * FD_GRAD_STEP);
    }
    let h = FD_HESS_STEP;
    for i in 0..d {
        for j in i..d {
            let mut f = |si: f64, sj: f64| {
                w[i] += si * h;
                w[j] += sj * h;
                let v = c(&w);
                w[i] = z[i];
                w[j] = z[j];
                v
            };
            let v = (f(1.0, 1.0) - f(1.0, -1.0) - f(-1.0, 1.0) + f(-1.0, -1.0)) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (g, hess)
}

fn linearize(model: &dyn DynamicsModel, x: &[f64], u: &[f64], fx: &[f64]) -> Linearization {
    let (n, m) = (x.len(), u.len());
    let (a, b) = model
        .jacobians(x, u)
        .unwrap_or_else(|| dynamics_jacobians(model, x, u, fx));
    let cost = |z: &[f64]| -model.reward(&z[..n], &z[n..]);
    let z: Vec<f64> = x.iter().chain(u).copied().collect();
    let (g, hh) = cost_derivatives(&cost, &z);
    Linearization {
        a,
        b,
        lx: g.rows(0, n).into_owned(),
        lu: g.rows(n, m).into_owned(),
        lxx: hh.view((0, 0), (n, n)).into_owned(),
        luu: hh.view((n, n), (m, m)).into_owned(),
        lux: hh.view((n, 0), (m, n)).into_owned(),
    }
}

fn rollout_cost(model: &dyn DynamicsModel, x0: &[f64], controls: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.to_vec());
    let mut cost = 0.0;
    for u in controls {
        let x = states.last().expect("nonempty");
        cost -= model.reward(x, u);
        let next = model.next_state(x, u);
        states.push(next);
    }
    cost -= model.terminal_reward(states.last().expect("nonempty"));
    (states, cost)
}

/// Iterative LQR with control clamping, Levenberg-style regularization of
/// `Q_uu` and a backtracking line search. Cost derivatives are finite
/// differences; dynamics Jacobians too unless the model supplies them.
pub fn ilqr_plan(
    model: &dyn DynamicsModel,
    x0: &[f64],
    spec: &OracleSpec,
    bounds: &ActionBounds,
    init: Option<&[Vec<f64>]>,
) -> Result<IlqrPlan> {
    spec.validate()?;
    let (h, n, m) = (spec.horizon, model.state_dim(), model.action_dim());
    if x0.len() != n || bounds.low.len() != m {
        return Err(Error::Shape("planner state or action dimension".into()));
    }
    let angles = model.angle_dims().to_vec();
    let mut controls: Vec<Vec<f64>> = match init {
        Some(u) if u.len() == h => u.to_vec(),
        _ => vec![bounds.center(); h],
    };
    controls.iter_mut().for_each(|u| bounds.clamp(u));
    let (mut states, mut cost) = rollout_cost(model, x0, &controls);
    if !cost.is_finite() {
        return Err(Error::PlannerFailure("initial rollout is non-finite".into()));
    }
    let mut gains = vec![DMatrix::zeros(m, n); h];
    let mut mu = 0.0f64;
    let mut iterations = 0;
    let mut checked_cost = false;
    while iterations < spec.max_iterations {
        iterations += 1;
        let lin: Vec<Linearization> = (0..h)
            .map(|t| linearize(model, &states[t], &controls[t], &states[t + 1]))
            .collect();
        if !checked_cost {
            for l in &lin {
                let sym = 0.5 * (&l.luu + l.luu.transpose());
                if Cholesky::new(sym).is_none() {
                    return Err(Error::InvalidCost);
                }
            }
            checked_cost = true;
        }
        let terminal = |z: &[f64]| -model.terminal_reward(z);
        let (vx_t, vxx_t) = cost_derivatives(&terminal, &states[h]);

        // backward pass, raising the regularizer until every Q_uu factors
        let (ff, fb, expected) = loop {
            match backward_pass(&lin, &vx_t, &vxx_t, mu) {
                Some(r) => break r,
                None => {
                    mu = (mu * 10.0).max(1e-6);
                    if mu > 1e10 {
                        return Err(Error::PlannerFailure("Q_uu not positive definite at any regularization".into()));
                    }
                }
            }
        };

        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..10 {
            let mut x = x0.to_vec();
            let mut new_u = Vec::with_capacity(h);
            let mut new_cost = 0.0;
            let mut new_states = vec![x.clone()];
            for t in 0..h {
                let dx = DVector::from_vec(state_diff(&x, &states[t], &angles));
                let du = &ff[t] * alpha + &fb[t] * dx;
                let mut u: Vec<f64> = controls[t].iter().zip(du.iter()).map(|(a, b)| a + b).collect();
                bounds.clamp(&mut u);
                new_cost -= model.reward(&x, &u);
                x = model.next_state(&x, &u);
                new_states.push(x.clone());
                new_u.push(u);
            }
            new_cost -= model.terminal_reward(&x);
            if new_cost.is_finite() && new_cost < cost {
                accepted = Some((new_u, new_states, new_cost));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((u, s, c)) => {
                let improvement = cost - c;
                controls = u;
                states = s;
                cost = c;
                gains = fb;
                mu = if mu <= 1e-6 { 0.0 } else { mu / 10.0 };
                if improvement <= spec.tolerance * (1.0 + cost.abs()) || expected.abs() <= spec.tolerance * (1.0 + cost.abs()) {
                    break;
                }
            }
            None => {
                // no descent at the nominal: treat as converged unless the
                // regularizer still has room to shorten the step
                gains = fb;
                mu = (mu * 10.0).max(1e-6);
                if mu > 1e6 || expected.abs() <= spec.tolerance * (1.0 + cost.abs()) {
                    break;
                }
            }
        }
    }
    Ok(IlqrPlan {
        controls,
        states,
        gains,
        cost,
        iterations,
    })
}

type BackwardResult = (Vec<DVector<f64>>, Vec<DMatrix<f64>>, f64);

fn backward_pass(lin: &[Linearization], vx_t: &DVector<f64>, vxx_t: &DMatrix<f64>, mu: f64) -> Option<BackwardResult> {
    let h = lin.len();
    let mut vx = vx_t.clone();
    let mut vxx = vxx_t.clone();
    let mut ff = vec![DVector::zeros(0); h];
    let mut fb = vec![DMatrix::zeros(0, 0); h];
    let mut expected = 0.0;
    for t in (0..h).rev() {
        let l = &lin[t];
        let at = l.a.transpose();
        let bt = l.b.transpose();
        let qx = &l.lx + &at * &vx;
        let qu = &l.lu + &bt * &vx;
        let qxx = &l.lxx + &at * &vxx * &l.a;
        let quu = &l.luu + &bt * &vxx * &l.b;
        let qux = &l.lux + &bt * &vxx * &l.a;
        let m = quu.nrows();
        let quu_reg = 0.5 * (&quu + quu.transpose()) + DMatrix::identity(m, m) * mu;
        let chol = Cholesky::new(quu_reg)?;
        let k = -chol.solve(&qu);
        let kk = -chol.solve(&qux);
        expected += k.dot(&qu) + 0.5 * k.dot(&(&quu * &k));
        let kkt = kk.transpose();
        vx = &qx + &kkt * &quu * &k + &kkt * &qu + qux.transpose() * &k;
        let v = &qxx + &kkt * &quu * &kk + &kkt * &qux + qux.transpose() * &kk;
        vxx = 0.5 * (&v + v.transpose());
        if vx.iter().chain(vxx.iter()).any(|x| !x.is_finite()) {
            return None;
        }
        ff[t] = k;
        fb[t] = kk;
    }
    Some((ff, fb, expected))
}

/// A receding-horizon controller over a frozen model.
pub struct PlannerPolicy {
    model: Arc<dyn DynamicsModel>,
    spec: OracleSpec,
    bounds: ActionBounds,
    rng: Rng,
    plan: Option<ActivePlan>,
    scores: Vec<f64>,
}

struct ActivePlan {
    controls: Vec<Vec<f64>>,
    states: Vec<Vec<f64>>,
    gains: Option<Vec<DMatrix<f64>>>,
    cursor: usize,
}

impl PlannerPolicy {
    pub fn new(model: Arc<dyn DynamicsModel>, spec: OracleSpec, bounds: ActionBounds) -> Result<Self> {
        spec.validate()?;
        if spec.kind == OracleKind::ValueIteration {
            return Err(Error::invalid("oracle", "value iteration needs a tabular model"));
        }
        if bounds.low.len() != model.action_dim() {
            return Err(Error::Shape("action bounds do not match the model".into()));
        }
        let rng = rng::seeded(spec.seed);
        Ok(Self {
            model,
            spec,
            bounds,
            rng,
            plan: None,
            scores: Vec::new(),
        })
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    /// Model returns of every plan made so far (uncertified).
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Forgets the current plan, e.g. at an episode boundary.
    pub fn reset(&mut self) {
        self.plan = None;
    }

    fn warm_start(&self) -> Option<Vec<Vec<f64>>> {
        let p = self.plan.as_ref()?;
        let mut u: Vec<Vec<f64>> = p.controls.iter().skip(p.cursor).cloned().collect();
        let last = u.last().cloned().unwrap_or_else(|| self.bounds.center());
        u.resize(self.spec.horizon, last);
        Some(u)
    }

    fn replan(&mut self, state: &[f64]) -> Result<()> {
        let init = self.warm_start();
        let plan = match self.spec.kind {
            OracleKind::CemMpc => {
                let p = cem_plan(self.model.as_ref(), state, &self.spec, &self.bounds, init.as_deref(), &mut self.rng)?;
                self.scores.push(*p.best_scores.last().expect("iterations >= 1"));
                let states = rollout_cost(self.model.as_ref(), state, &p.controls).0;
                ActivePlan {
                    controls: p.controls,
                    states,
                    gains: None,
                    cursor: 0,
                }
            }
            OracleKind::Ilqr => {
                let p = ilqr_plan(self.model.as_ref(), state, &self.spec, &self.bounds, init.as_deref())?;
                self.scores.push(-p.cost);
                ActivePlan {
                    controls: p.controls,
                    states: p.states,
                    gains: Some(p.gains),
                    cursor: 0,
                }
            }
            OracleKind::ValueIteration => unreachable!("rejected in new"),
        };
        self.plan = Some(plan);
        Ok(())
    }

    /// Action of the current plan's local controller at plan index `t`,
    /// without replanning. Before any plan exists this is the center of the
    /// action box.
    pub fn feedback_action(&self, state: &[f64], t: usize) -> Vec<f64> {
        let mut u = match &self.plan {
            None => self.bounds.center(),
            Some(p) => {
                let t = t.min(p.controls.len() - 1);
                let mut u = p.controls[t].clone();
                if let Some(gains) = &p.gains {
                    let dx = DVector::from_vec(state_diff(state, &p.states[t], self.model.angle_dims()));
                    let du = &gains[t] * dx;
                    u.iter_mut().zip(du.iter()).for_each(|(a, b)| *a += b);
                }
                u
            }
        };
        self.bounds.clamp(&mut u);
        u
    }

    /// Action for `state`, replanning when the current plan is stale.
    pub fn act(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.model.state_dim() {
            return Err(Error::Shape("state dimension".into()));
        }
        let stale = match &self.plan {
            None => true,
            Some(p) => p.cursor >= self.spec.replan_every.min(p.controls.len()),
        };
        if stale {
            self.replan(state)?;
        }
        let t = self.plan.as_ref().expect("planned above").cursor;
        let u = self.feedback_action(state, t);
        self.plan.as_mut().expect("planned above").cursor += 1;
        Ok(u)
    }
}

/// The model an oracle optimizes against.
pub enum OracleModel<'a> {
    Tabular(&'a TabularMdp),
    Continuous(Arc<dyn DynamicsModel>, ActionBounds),
}

pub enum OraclePolicy {
    /// Greedy policy with a certified suboptimality, valid from every start
    /// distribution.
    Tabular { policy: TabularPolicy, eps_opt: f64 },
    Planner(PlannerPolicy),
}

pub fn optimize(model: OracleModel<'_>, spec: &OracleSpec) -> Result<OraclePolicy> {
    spec.validate()?;
    match (model, spec.kind) {
        (OracleModel::Tabular(mdp), OracleKind::ValueIteration) => {
            let sol = value_iteration_capped(mdp, spec.tolerance, DEFAULT_VI_CAP)?;
            Ok(OraclePolicy::Tabular {
                policy: sol.policy,
                eps_opt: sol.eps_opt,
            })
        }
        (OracleModel::Continuous(dynamics, bounds), OracleKind::CemMpc | OracleKind::Ilqr) => {
            Ok(OraclePolicy::Planner(PlannerPolicy::new(dynamics, spec.clone(), bounds)?))
        }
        _ => Err(Error::invalid("oracle", "oracle kind does not match the model")),
    }
}
