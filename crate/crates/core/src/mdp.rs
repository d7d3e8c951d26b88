//! Exact finite-MDP machinery.
//!
//! Everything here is a pure function of immutable inputs. Transition
//! tensors are stored row-major as `(s, a, s')`, rewards as `(s, a)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;
/// Above this many states, policy evaluation iterates instead of solving.
const DIRECT_SOLVE_MAX_STATES: usize = 512;
const ITERATIVE_EVAL_TOL: f64 = 1e-12;
/// Discarded discounted tail mass when truncating occupancy sums.
const VISITATION_TAIL: f64 = 1e-12;

/// A discounted MDP with finite state and action spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    reward_bound: f64,
}

/// On-disk form of a [`TabularMdp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reward_bound: Option<f64>,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let bound = match doc.reward_bound {
            Some(b) => b,
            None => doc.reward.iter().fold(0.0_f64, |m, r| m.max(r.abs())),
        };
        TabularMdp::new(
            doc.n_states,
            doc.n_actions,
            doc.transition,
            doc.reward,
            doc.gamma,
            bound,
        )
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(m: TabularMdp) -> Self {
        MdpDocument {
            n_states: m.n_states,
            n_actions: m.n_actions,
            transition: m.transition,
            reward: m.reward,
            gamma: m.gamma,
            reward_bound: Some(m.reward_bound),
        }
    }
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        reward_bound: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("mdp", "state and action counts must be positive"));
        }
        let pairs = n_states
            .checked_mul(n_actions)
            .ok_or_else(|| Error::invalid("mdp", "state-action count overflows"))?;
        let cells = pairs
            .checked_mul(n_states)
            .ok_or_else(|| Error::invalid("mdp", "transition tensor size overflows"))?;
        if transition.len() != cells {
            return Err(Error::Shape(format!(
                "transition has {} entries, expected {cells}",
                transition.len()
            )));
        }
        if reward.len() != pairs {
            return Err(Error::Shape(format!(
                "reward has {} entries, expected {pairs}",
                reward.len()
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid("gamma", format!("{gamma} not in (0, 1)")));
        }
        if !(reward_bound >= 0.0) || !reward_bound.is_finite() {
            return Err(Error::invalid("reward bound", format!("{reward_bound}")));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            check_distribution(row).map_err(|detail| {
                Error::invalid(
                    "transition row",
                    format!("(s={}, a={}): {detail}", i / n_actions, i % n_actions),
                )
            })?;
        }
        if let Some(r) = reward
            .iter()
            .find(|r| !r.is_finite() || r.abs() > reward_bound)
        {
            return Err(Error::invalid(
                "reward",
                format!("{r} exceeds bound {reward_bound}"),
            ));
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            reward_bound,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// `P(· | s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Same rewards and discount, different transitions.
    pub fn with_transition(&self, transition: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            transition,
            self.reward.clone(),
            self.gamma,
            self.reward_bound,
        )
    }

    fn same_spaces(&self, other: &TabularMdp) -> Result<()> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::Shape(format!(
                "spaces differ: {}x{} vs {}x{}",
                self.n_states, self.n_actions, other.n_states, other.n_actions
            )));
        }
        Ok(())
    }

    /// `max_{s,a} ‖P_self(·|s,a) − P_other(·|s,a)‖₁`.
    pub fn max_row_l1(&self, other: &TabularMdp) -> Result<f64> {
        self.same_spaces(other)?;
        Ok(self
            .transition
            .chunks(self.n_states)
            .zip(other.transition.chunks(self.n_states))
            .map(|(p, q)| l1(p, q))
            .fold(0.0, f64::max))
    }

    /// `max_{s,a} TV(P_self(·|s,a), P_other(·|s,a))`.
    pub fn max_row_tv(&self, other: &TabularMdp) -> Result<f64> {
        Ok(0.5 * self.max_row_l1(other)?)
    }
}

fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(format!("entry {x} is negative or non-finite"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(format!("sums to {sum}"));
    }
    Ok(())
}

fn l1(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

/// A stationary stochastic policy `π(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Shape(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_distribution(row)
                .map_err(|d| Error::invalid("policy row", format!("s={s}: {d}")))?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::invalid("action", format!("{a} >= {n_actions}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Self::new(actions.len(), n_actions, probs)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Most likely action per state, ties to the lowest index.
    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.n_states)
            .map(|s| argmax_first(self.row(s)))
            .collect()
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(Error::Shape(format!(
                "policy is {}x{}, mdp is {}x{}",
                self.n_states, self.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(())
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Start-state distribution `μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalContext {
    initial_dist: Vec<f64>,
}

impl EvalContext {
    pub fn new(initial_dist: Vec<f64>) -> Result<Self> {
        check_distribution(&initial_dist)
            .map_err(|d| Error::invalid("initial distribution", d))?;
        Ok(Self { initial_dist })
    }

    pub fn uniform(n_states: usize) -> Self {
        Self {
            initial_dist: vec![1.0 / n_states as f64; n_states],
        }
    }

    pub fn point(n_states: usize, s: usize) -> Self {
        let mut initial_dist = vec![0.0; n_states];
        initial_dist[s] = 1.0;
        Self { initial_dist }
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if self.initial_dist.len() != mdp.n_states {
            return Err(Error::Shape(format!(
                "initial distribution has {} states, mdp has {}",
                self.initial_dist.len(),
                mdp.n_states
            )));
        }
        Ok(())
    }

    pub fn weigh(&self, values: &[f64]) -> f64 {
        self.initial_dist.iter().zip(values).map(|(m, v)| m * v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub values: Vec<f64>,
    /// Last Bellman residual in the sup norm.
    pub residual: f64,
}

/// Normalized discounted occupancy `d(s, a)`, indexed `s * n_actions + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Visitation {
    pub n_actions: usize,
    pub density: Vec<f64>,
}

impl Visitation {
    pub fn at(&self, s: usize, a: usize) -> f64 {
        self.density[s * self.n_actions + a]
    }
}

/// Builds the empirical MDP from per-pair next-state counts: each row is
/// the observed frequency `count(s,a,s') / N(s,a)`.
pub fn build_empirical_model(
    counts: &[u64],
    template: &TabularMdp,
) -> Result<TabularMdp> {
    let n = template.n_states;
    if counts.len() != template.transition.len() {
        return Err(Error::Shape(format!(
            "counts have {} entries, expected {}",
            counts.len(),
            template.transition.len()
        )));
    }
    let mut transition = vec![0.0; counts.len()];
    for (i, (row, out)) in counts.chunks(n).zip(transition.chunks_mut(n)).enumerate() {
        let total: u64 = row.iter().sum();
        if total == 0 {
            return Err(Error::MissingSamples {
                state: i / template.n_actions,
                action: i % template.n_actions,
            });
        }
        let inv = total as f64;
        for (o, &c) in out.iter_mut().zip(row) {
            *o = c as f64 / inv;
        }
        renormalize(out);
    }
    template.with_transition(transition)
}

/// Pushes the rounding residue of a frequency row onto its largest entry so
/// the row sums to one to machine precision.
fn renormalize(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    let k = argmax_first(row);
    row[k] += 1.0 - sum;
}

/// Exact `V^π` and the scalar return `V^π(μ)`.
pub fn policy_evaluation(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    ctx: &EvalContext,
) -> Result<(ValueTable, f64)> {
    policy.check(mdp)?;
    ctx.check(mdp)?;
    let n = mdp.n_states;
    let (p_pi, r_pi) = policy_kernel(mdp, policy);
    let values = if n <= DIRECT_SOLVE_MAX_STATES {
        let mut a = DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] -= mdp.gamma * p_pi[i * n + j];
            }
        }
        let b = DVector::from_vec(r_pi.clone());
        let v = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::NumericalFailure("policy evaluation solve".into()))?;
        v.iter().copied().collect::<Vec<_>>()
    } else {
        let mut v = vec![0.0; n];
        loop {
            let next = apply_kernel(&p_pi, &r_pi, mdp.gamma, &v);
            let res = sup_diff(&next, &v);
            v = next;
            if res <= ITERATIVE_EVAL_TOL {
                break;
            }
        }
        v
    };
    let next = apply_kernel(&p_pi, &r_pi, mdp.gamma, &values);
    let residual = sup_diff(&next, &values);
    let ret = ctx.weigh(&values);
    Ok((ValueTable { values, residual }, ret))
}

/// `P_π` (row-major `n×n`) and `r_π`.
fn policy_kernel(mdp: &TabularMdp, policy: &TabularPolicy) -> (Vec<f64>, Vec<f64>) {
    let n = mdp.n_states;
    let mut p = vec![0.0; n * n];
    let mut r = vec![0.0; n];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            r[s] += w * mdp.reward(s, a);
            for (dst, &t) in p[s * n..(s + 1) * n].iter_mut().zip(mdp.row(s, a)) {
                *dst += w * t;
            }
        }
    }
    (p, r)
}

fn apply_kernel(p: &[f64], r: &[f64], gamma: f64, v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|s| r[s] + gamma * dot(&p[s * n..(s + 1) * n], v))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Result of [`value_iteration`].
#[derive(Debug, Clone)]
pub struct OptimalSolution {
    /// Final iterate, an approximation of `V*`.
    pub values: ValueTable,
    /// Greedy policy with respect to the final iterate.
    pub policy: TabularPolicy,
    /// Suboptimality certificate `2γ·r/(1−γ)` for `policy`, where `r ≤ tol`
    /// is the final sup-norm residual.
    pub eps_opt: f64,
    pub iterations: usize,
}

impl OptimalSolution {
    /// `V*(μ)` read off the value table.
    pub fn table_return(&self, ctx: &EvalContext) -> f64 {
        ctx.weigh(&self.values.values)
    }

    /// `V^{π̂}(μ)` by exact evaluation of the greedy policy.
    pub fn greedy_return(&self, mdp: &TabularMdp, ctx: &EvalContext) -> Result<f64> {
        Ok(policy_evaluation(mdp, &self.policy, ctx)?.1)
    }
}

pub const DEFAULT_VI_CAP: usize = 1_000_000;

pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<OptimalSolution> {
    value_iteration_capped(mdp, tol, DEFAULT_VI_CAP)
}

pub fn value_iteration_capped(
    mdp: &TabularMdp,
    tol: f64,
    max_iterations: usize,
) -> Result<OptimalSolution> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance", format!("{tol} must be positive")));
    }
    let n = mdp.n_states;
    let mut v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iterations {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..mdp.n_actions)
                    .map(|a| q_value(mdp, &v, s, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        residual = sup_diff(&next, &v);
        v = next;
        if residual <= tol {
            let actions = greedy(mdp, &v);
            let policy = TabularPolicy::deterministic(mdp.n_actions, &actions)?;
            return Ok(OptimalSolution {
                values: ValueTable {
                    values: v,
                    residual,
                },
                policy,
                eps_opt: 2.0 * mdp.gamma * residual / (1.0 - mdp.gamma),
                iterations: it,
            });
        }
    }
    Err(Error::ConvergenceFailure {
        tol,
        iterations: max_iterations,
        residual,
    })
}

fn q_value(mdp: &TabularMdp, v: &[f64], s: usize, a: usize) -> f64 {
    mdp.reward(s, a) + mdp.gamma * dot(mdp.row(s, a), v)
}

/// Greedy actions with respect to `v`, ties broken by the lowest index.
pub fn greedy(mdp: &TabularMdp, v: &[f64]) -> Vec<usize> {
    (0..mdp.n_states)
        .map(|s| {
            let q: Vec<f64> = (0..mdp.n_actions).map(|a| q_value(mdp, v, s, a)).collect();
            argmax_first(&q)
        })
        .collect()
}

/// `d(s,a) = (1−γ) Σ_h γ^h Pr_h(s) π(a|s)`, truncated once the remaining
/// discounted mass falls below `1e-12`.
pub fn visitation_distribution(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    ctx: &EvalContext,
) -> Result<Visitation> {
    policy.check(mdp)?;
    ctx.check(mdp)?;
    let (n, na, g) = (mdp.n_states, mdp.n_actions, mdp.gamma);
    let (p_pi, _) = policy_kernel(mdp, policy);
    let horizon = (VISITATION_TAIL.ln() / g.ln()).ceil() as usize + 1;
    let mut state_mass = vec![0.0; n];
    let mut rho = ctx.initial_dist.clone();
    let mut weight = 1.0 - g;
    for _ in 0..horizon {
        for (m, r) in state_mass.iter_mut().zip(&rho) {
            *m += weight * r;
        }
        let mut next = vec![0.0; n];
        for (s, &mass) in rho.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (dst, &t) in next.iter_mut().zip(&p_pi[s * n..(s + 1) * n]) {
                *dst += mass * t;
            }
        }
        rho = next;
        weight *= g;
    }
    let mut density = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            density[s * na + a] = state_mass[s] * policy.prob(s, a);
        }
    }
    Ok(Visitation {
        n_actions: na,
        density,
    })
}

/// Total-variation distance `½ Σ |p − q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5 * l1(p, q))
}

/// `ε_M^π = Σ_{s,a} d^π(s,a) · TV(P(·|s,a), P_M(·|s,a))`, with the
/// occupancy taken under the true dynamics.
pub fn model_inconsistency(
    true_mdp: &TabularMdp,
    model: &TabularMdp,
    policy: &TabularPolicy,
    ctx: &EvalContext,
) -> Result<f64> {
    true_mdp.same_spaces(model)?;
    let d = visitation_distribution(true_mdp, policy, ctx)?;
    let mut eps = 0.0;
    for s in 0..true_mdp.n_states {
        for a in 0..true_mdp.n_actions {
            let w = d.at(s, a);
            if w > 0.0 {
                eps += w * tv_distance(true_mdp.row(s, a), model.row(s, a))?;
            }
        }
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(reward: Vec<f64>, gamma: f64) -> TabularMdp {
        let na = reward.len();
        let bound = reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        TabularMdp::new(1, na, vec![1.0; na], reward, gamma, bound).unwrap()
    }

    /// s0 -> s1 -> s1 ..., r(s0)=0, r(s1)=1.
    fn absorbing_chain() -> TabularMdp {
        TabularMdp::new(2, 1, vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 1.0], 0.5, 1.0).unwrap()
    }

    #[test]
    fn empirical_rows_are_frequencies() {
        let template = TabularMdp::new(2, 1, vec![0.5, 0.5, 0.5, 0.5], vec![0.0, 0.0], 0.9, 0.0)
            .unwrap();
        let m = build_empirical_model(&[3, 0, 2, 1], &template).unwrap();
        assert_eq!(m.row(0, 0), &[1.0, 0.0]);
        assert_abs_diff_eq!(m.row(1, 0)[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.row(1, 0)[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn empirical_model_names_the_missing_pair() {
        let template = TabularMdp::new(2, 2, vec![0.5; 8], vec![0.0; 4], 0.9, 0.0).unwrap();
        let err = build_empirical_model(&[1, 0, 1, 0, 0, 0, 2, 2], &template).unwrap_err();
        assert!(matches!(
            err,
            Error::MissingSamples {
                state: 1,
                action: 0
            }
        ));
    }

    #[test]
    fn geometric_series_value() {
        let m = single(vec![1.0], 0.5);
        let (v, ret) =
            policy_evaluation(&m, &TabularPolicy::uniform(1, 1), &EvalContext::uniform(1)).unwrap();
        assert_abs_diff_eq!(v.values[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ret, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn absorbing_chain_values() {
        let m = absorbing_chain();
        let (v, _) =
            policy_evaluation(&m, &TabularPolicy::uniform(2, 1), &EvalContext::uniform(2)).unwrap();
        assert_abs_diff_eq!(v.values[1], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(v.values[0], 1.0, epsilon = 1e-14);
        assert!(v.residual < 1e-14);
    }

    #[test]
    fn value_iteration_null_reward() {
        let m = TabularMdp::new(2, 2, vec![0.5; 8], vec![0.0; 4], 0.9, 0.0).unwrap();
        let sol = value_iteration(&m, 1e-10).unwrap();
        assert!(sol.values.values.iter().all(|v| *v == 0.0));
        assert_eq!(sol.policy.greedy_actions(), vec![0, 0]);
    }

    #[test]
    fn value_iteration_single_state_two_actions() {
        let m = single(vec![0.0, 1.0], 0.9);
        let sol = value_iteration(&m, 1e-12).unwrap();
        assert_abs_diff_eq!(sol.values.values[0], 10.0, epsilon = 1e-9);
        assert_eq!(sol.policy.greedy_actions(), vec![1]);
    }

    #[test]
    fn value_iteration_cap_breach() {
        let m = single(vec![1.0], 0.99);
        assert!(matches!(
            value_iteration_capped(&m, 1e-12, 3),
            Err(Error::ConvergenceFailure { .. })
        ));
        assert!(value_iteration(&m, 0.0).is_err());
    }

    #[test]
    fn visitation_point_mass_and_chain() {
        let m = single(vec![1.0], 0.5);
        let d = visitation_distribution(&m, &TabularPolicy::uniform(1, 1), &EvalContext::uniform(1))
            .unwrap();
        assert_abs_diff_eq!(d.at(0, 0), 1.0, epsilon = 1e-12);

        let m = absorbing_chain();
        let d = visitation_distribution(
            &m,
            &TabularPolicy::uniform(2, 1),
            &EvalContext::point(2, 0),
        )
        .unwrap();
        assert_abs_diff_eq!(d.at(0, 0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d.at(1, 0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            tv_distance(&[0.5, 0.5], &[0.25, 0.75]).unwrap(),
            0.25,
            epsilon = 1e-15
        );
        assert!(matches!(tv_distance(&[1.0], &[0.5, 0.5]), Err(Error::Shape(_))));
    }

    #[test]
    fn inconsistency_of_identical_and_point_mass() {
        let m = absorbing_chain();
        let pi = TabularPolicy::uniform(2, 1);
        let ctx = EvalContext::uniform(2);
        assert_eq!(model_inconsistency(&m, &m, &pi, &ctx).unwrap(), 0.0);

        let truth = TabularMdp::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 0.9, 0.0)
            .unwrap();
        let model = truth
            .with_transition(vec![0.7, 0.3, 0.0, 1.0])
            .unwrap();
        let eps = model_inconsistency(&truth, &model, &pi, &EvalContext::point(2, 0)).unwrap();
        assert_abs_diff_eq!(eps, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn constructor_rejects_bad_inputs() {
        assert!(TabularMdp::new(1, 1, vec![0.9], vec![0.0], 0.5, 0.0).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![2.0], 0.5, 1.0).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.0], 1.0, 0.0).is_err());
        assert!(TabularMdp::new(2, 1, vec![1.0], vec![0.0], 0.5, 0.0).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.5, -0.5], vec![0.0], 0.5, 0.0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = absorbing_chain();
        let text = serde_json::to_string(&m).unwrap();
        let back: TabularMdp = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
        assert!(serde_json::from_str::<TabularMdp>(
            r#"{"n_states":1,"n_actions":1,"transition":[1.0],"reward":[0.0],"gamma":0.5,"extra":1}"#
        )
        .is_err());
    }
}
