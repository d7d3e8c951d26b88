//! Performance-difference bounds and their numerical verification.
//!
//! The calculators are plain arithmetic. [`verify_gap_campaign`] builds
//! empirical models from a generative sampler, solves them exactly and
//! checks every bound against the exactly computed performance gap.

use std::io::Write;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Binomial, Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{random_mdp, GenerativeSampler};
use crate::error::{Error, Result};
use crate::mdp::{
    build_empirical_model, model_inconsistency, policy_evaluation, value_iteration, EvalContext,
    TabularMdp,
};
use crate::rng;

/// Absolute slack used by every exact-arithmetic check.
pub const EXACT_TOL: f64 = 1e-9;

/// `κ = 2Rγ/(1−γ)²`.
pub fn kappa(gamma: f64, reward_bound: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid("gamma", format!("{gamma} not in (0, 1)")));
    }
    if !(reward_bound >= 0.0) {
        return Err(Error::invalid("reward bound", format!("{reward_bound}")));
    }
    Ok(2.0 * reward_bound * gamma / ((1.0 - gamma) * (1.0 - gamma)))
}

/// Scalars entering the lower bounds for a model update `M1 → M2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub gamma: f64,
    pub reward_bound: f64,
    pub kappa: f64,
    pub lipschitz: f64,
    pub eps_opt: f64,
    pub eps_m1_pi1: f64,
    pub eps_m2_pi2: f64,
    pub ceiling_v1: f64,
    pub ceiling_v2: f64,
    pub sigma: f64,
}

impl BoundInputs {
    /// `γ/(1−γ)·L·2σ`, the price of a model shift of size `σ`.
    pub fn shift_penalty(&self) -> f64 {
        self.gamma / (1.0 - self.gamma) * self.lipschitz * 2.0 * self.sigma
    }

    /// Whether `κ` and `L` agree with `γ` and `R`.
    pub fn is_consistent(&self) -> bool {
        let Ok(k) = kappa(self.gamma, self.reward_bound) else {
            return false;
        };
        let scale = k.abs().max(1.0);
        (self.kappa - k).abs() <= 1e-12 * scale
            && self.lipschitz >= self.reward_bound / (1.0 - self.gamma) * (1.0 - 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralBound {
    /// `κ(ε1 − ε2) + V*2 − V*1 − ε_opt`.
    pub bound_c: f64,
    /// `−κ(ε1 + ε2) + V*2 − V*1 − ε_opt`, valid without the equality
    /// approximation of the model-return discrepancy.
    pub conservative_c: f64,
}

/// Lower bounds on the true improvement `V^{π2}(μ) − V^{π1}(μ)` of a
/// model update `M1 → M2`.
pub fn gap_lower_bound(inputs: &BoundInputs) -> GeneralBound {
    let ceiling = inputs.ceiling_v2 - inputs.ceiling_v1;
    GeneralBound {
        bound_c: inputs.kappa * (inputs.eps_m1_pi1 - inputs.eps_m2_pi2) + ceiling - inputs.eps_opt,
        conservative_c: -inputs.kappa * (inputs.eps_m1_pi1 + inputs.eps_m2_pi2) + ceiling
            - inputs.eps_opt,
    }
}

/// `(γ/(1−γ))·L·max_{s,a} ‖P_{M2}(·|s,a) − P_{M1}(·|s,a)‖₁`, which
/// dominates `|V*_{M2}(μ) − V*_{M1}(μ)|`.
pub fn ceiling_gap_bound(
    m1: &TabularMdp,
    m2: &TabularMdp,
    lipschitz: f64,
    gamma: f64,
) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid("gamma", format!("{gamma} not in (0, 1)")));
    }
    let minimum = m1.reward_bound().max(m2.reward_bound()) / (1.0 - gamma);
    // relative slack absorbs the rounding in R/(1−γ)
    if !(lipschitz >= minimum * (1.0 - 1e-12)) {
        return Err(Error::InvalidLipschitz { lipschitz, minimum });
    }
    Ok(gamma / (1.0 - gamma) * lipschitz * m1.max_row_l1(m2)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_c: f64,
    pub conservative_c: f64,
    /// `V^{π2|M2}(μ) − V^{π1|M1}(μ)` under the true dynamics, when known.
    pub actual_gap: Option<f64>,
    pub constraint_satisfied: bool,
    /// `max_{s,a} TV(P_{M2}(·|s,a), P_{M1}(·|s,a))`.
    pub constraint_lhs: f64,
}

/// Lower bound under the per-pair model-shift constraint `TV ≤ σ`.
pub fn shift_constrained_bound(
    inputs: &BoundInputs,
    m1: &TabularMdp,
    m2: &TabularMdp,
) -> Result<BoundReport> {
    let constraint_lhs = m2.max_row_tv(m1)?;
    let penalty = inputs.shift_penalty();
    Ok(BoundReport {
        bound_c: inputs.kappa * (inputs.eps_m1_pi1 - inputs.eps_m2_pi2) - penalty - inputs.eps_opt,
        conservative_c: -inputs.kappa * (inputs.eps_m1_pi1 + inputs.eps_m2_pi2)
            - penalty
            - inputs.eps_opt,
        actual_gap: None,
        constraint_satisfied: constraint_lhs <= inputs.sigma,
        constraint_lhs,
    })
}

/// Requirement on the new model's bias, with the L1 expectation written as
/// twice the TV expectation.
pub fn bias_requirement_holds(inputs: &BoundInputs, eps_m2_pi2: f64) -> bool {
    let g = inputs.gamma;
    let rhs = 2.0 * inputs.eps_m1_pi1
        - (1.0 - g) * inputs.lipschitz / inputs.reward_bound * 2.0 * inputs.sigma
        - 2.0 / inputs.kappa * inputs.eps_opt;
    2.0 * eps_m2_pi2 <= rhs
}

/// Parameters of the sample-count interval between model updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalQuery {
    /// Current one-step L1 error of `M1`.
    pub delta_m1: f64,
    pub sigma: f64,
    pub eps_opt: f64,
    pub lipschitz: f64,
    pub reward_bound: f64,
    pub gamma: f64,
    /// Number of distinct next-state outcomes.
    pub vol_s: u32,
    pub xi: f64,
    pub n_existing: u64,
}

impl IntervalQuery {
    /// Accuracy still available after the shift and oracle budgets.
    pub fn epsilon(&self) -> f64 {
        let (g, r) = (self.gamma, self.reward_bound);
        self.delta_m1
            - (1.0 - g) * self.lipschitz / r * 2.0 * self.sigma
            - (1.0 - g) * (1.0 - g) / (r * g) * self.eps_opt
    }
}

/// `ln(2^v − 2)` without forming `2^v`.
fn ln_pow2_minus_two(v: u32) -> f64 {
    let v = f64::from(v);
    v * std::f64::consts::LN_2 + (-(2.0_f64).powf(1.0 - v)).ln_1p()
}

/// Samples per pair before which the whole-alphabet L1 deviation bound
/// holds at level `ξ` for accuracy `ε`, minus the `N` already held.
pub fn sample_interval_k(query: &IntervalQuery) -> Result<u64> {
    let eps = query.epsilon();
    if !(eps > 0.0) {
        return Err(Error::InfeasibleInterval { epsilon: eps });
    }
    if query.vol_s < 2 {
        return Err(Error::invalid("vol_s", "need at least two outcomes"));
    }
    if !(query.xi > 0.0 && query.xi < 1.0) {
        return Err(Error::invalid("xi", format!("{} not in (0, 1)", query.xi)));
    }
    let needed = 2.0 / (eps * eps) * (ln_pow2_minus_two(query.vol_s) - query.xi.ln());
    let raw = needed - query.n_existing as f64;
    // Values within rounding of an integer count as that integer.
    let k = (raw - 1e-9 * needed.abs().max(1.0)).ceil();
    if !k.is_finite() {
        return Err(Error::NumericalFailure("interval k".into()));
    }
    Ok(if k <= 0.0 { 0 } else { k as u64 })
}

/// `(2^a − 2)·exp(−m ε²/2)`, clipped to `[0, 1]`.
pub fn l1_concentration_bound(m: u64, eps: f64, alphabet: u32) -> Result<f64> {
    if m == 0 || !(eps > 0.0) || alphabet < 2 {
        return Err(Error::invalid(
            "concentration query",
            format!("m={m}, eps={eps}, alphabet={alphabet}"),
        ));
    }
    let log_p = ln_pow2_minus_two(alphabet) - m as f64 * eps * eps / 2.0;
    Ok(log_p.exp().clamp(0.0, 1.0))
}

/// Setup of a bound-verification campaign over random tabular MDPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub trials: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
    /// Samples per pair behind `M1`.
    pub n_samples: u64,
    /// Additional samples per pair behind `M2`.
    pub extra_samples: u64,
    pub seed: u64,
    #[serde(default = "default_vi_tol")]
    pub vi_tol: f64,
    /// `M2` reuses `M1`'s draws and adds `extra_samples` more.
    #[serde(default = "default_true")]
    pub shared_stream: bool,
    /// Shift threshold; defaults to the realized shift of each trial.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Defaults to `R/(1−γ)`.
    #[serde(default)]
    pub lipschitz: Option<f64>,
    /// Multiplies the `κ` handed to the calculators. Anything but 1 is a
    /// deliberate corruption the consistency check must catch.
    #[serde(default = "default_one")]
    pub kappa_scale: f64,
}

fn default_sparsity() -> f64 {
    1.0
}
fn default_vi_tol() -> f64 {
    1e-11
}
fn default_true() -> bool {
    true
}
fn default_one() -> f64 {
    1.0
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            n_states: 8,
            n_actions: 3,
            gamma: 0.9,
            sparsity: 1.0,
            n_samples: 20,
            extra_samples: 40,
            seed: 0,
            vi_tol: default_vi_tol(),
            shared_stream: true,
            sigma: None,
            lipschitz: None,
            kappa_scale: 1.0,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 || self.n_samples == 0 {
            return Err(Error::invalid("campaign", "counts and n_samples must be positive"));
        }
        if self.n_states > 256 || self.n_actions > 64 {
            return Err(Error::invalid("campaign", "at most 256 states and 64 actions"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid("campaign", "gamma must lie in (0, 1)"));
        }
        if !(self.vi_tol > 0.0) || !(self.kappa_scale > 0.0) {
            return Err(Error::invalid("campaign", "vi_tol and kappa_scale must be positive"));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::invalid("campaign", "sparsity must lie in (0, 1]"));
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0) {
                return Err(Error::invalid("campaign", "sigma must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Everything computed for one campaign trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub n: u64,
    pub k: u64,
    pub inputs: BoundInputs,
    pub eps_m1_pi2: f64,
    pub nominal_c: f64,
    pub conservative_c: f64,
    pub refined: BoundReport,
    pub actual_gap: f64,
    pub ceiling_gap: f64,
    pub ceiling_bound: f64,
    /// `|V_{M1}^{π1}(μ) − V^{π1}(μ) − κ ε_{M1}^{π1}|`.
    pub equality_residual: f64,
    pub bias_requirement_holds: bool,
    pub inputs_consistent: bool,
    pub simulation_ok: bool,
    pub conservative_ok: bool,
    pub refined_conservative_ok: bool,
    pub ceiling_ok: bool,
    /// `nominal_c ≤ actual_gap`, diagnostic only.
    pub nominal_c_ok: bool,
}

impl TrialReport {
    /// The equality approximation behind the nominal bound holds.
    pub fn equality_assumption_holds(&self) -> bool {
        self.equality_residual <= 1e-6 * self.inputs.kappa * self.inputs.eps_m1_pi1
    }

    /// All hard invariants hold.
    pub fn passed(&self) -> bool {
        self.inputs_consistent
            && self.simulation_ok
            && self.conservative_ok
            && self.refined_conservative_ok
            && self.ceiling_ok
    }
}

/// Runs `config.trials` independent trials; results are ordered by trial
/// index regardless of scheduling.
pub fn verify_gap_campaign(config: &CampaignConfig) -> Result<Vec<TrialReport>> {
    config.validate()?;
    (0..config.trials)
        .into_par_iter()
        .map(|t| run_trial(config, t))
        .collect()
}

fn run_trial(cfg: &CampaignConfig, trial: usize) -> Result<TrialReport> {
    let seed = rng::derive(cfg.seed, trial as u64);
    let truth = Arc::new(random_mdp(
        cfg.n_states,
        cfg.n_actions,
        cfg.gamma,
        cfg.sparsity,
        rng::derive(seed, 0),
    )?);
    let ctx = EvalContext::uniform(cfg.n_states);
    let mut sampler = GenerativeSampler::new(truth.clone(), rng::derive(seed, 1));
    let counts1 = sampler.draw_all(cfg.n_samples)?;
    let counts2 = if cfg.shared_stream {
        if cfg.extra_samples == 0 {
            counts1.clone()
        } else {
            let more = sampler.draw_all(cfg.extra_samples)?;
            counts1.iter().zip(&more).map(|(a, b)| a + b).collect()
        }
    } else {
        GenerativeSampler::new(truth.clone(), rng::derive(seed, 2))
            .draw_all(cfg.n_samples + cfg.extra_samples)?
    };
    let m1 = build_empirical_model(&counts1, &truth)?;
    let m2 = build_empirical_model(&counts2, &truth)?;

    let sol1 = value_iteration(&m1, cfg.vi_tol)?;
    let sol2 = value_iteration(&m2, cfg.vi_tol)?;
    let (pi1, pi2) = (&sol1.policy, &sol2.policy);

    let eps1 = model_inconsistency(&truth, &m1, pi1, &ctx)?;
    let eps2 = model_inconsistency(&truth, &m2, pi2, &ctx)?;
    let eps_m1_pi2 = model_inconsistency(&truth, &m1, pi2, &ctx)?;

    let (v1_true, v2_true) = (
        policy_evaluation(&truth, pi1, &ctx)?.1,
        policy_evaluation(&truth, pi2, &ctx)?.1,
    );
    let (v1_model, v2_model) = (
        policy_evaluation(&m1, pi1, &ctx)?.1,
        policy_evaluation(&m2, pi2, &ctx)?.1,
    );
    let (ceil1, ceil2) = (sol1.table_return(&ctx), sol2.table_return(&ctx));

    let r = truth.reward_bound();
    let true_kappa = kappa(cfg.gamma, r)?;
    let lipschitz = cfg.lipschitz.unwrap_or(r / (1.0 - cfg.gamma));
    let constraint_lhs = m2.max_row_tv(&m1)?;
    let inputs = BoundInputs {
        gamma: cfg.gamma,
        reward_bound: r,
        kappa: true_kappa * cfg.kappa_scale,
        lipschitz,
        eps_opt: sol1.eps_opt.max(sol2.eps_opt),
        eps_m1_pi1: eps1,
        eps_m2_pi2: eps2,
        ceiling_v1: ceil1,
        ceiling_v2: ceil2,
        sigma: cfg.sigma.unwrap_or(constraint_lhs),
    };
    let general = gap_lower_bound(&inputs);
    let mut refined = shift_constrained_bound(&inputs, &m1, &m2)?;
    let actual_gap = v2_true - v1_true;
    refined.actual_gap = Some(actual_gap);
    let ceiling_bound = ceiling_gap_bound(&m1, &m2, lipschitz.max(r / (1.0 - cfg.gamma)), cfg.gamma)?;
    let ceiling_gap = (ceil2 - ceil1).abs();

    let k = inputs.kappa;
    let simulation_ok = (v1_true - v1_model).abs() <= k * eps1 + EXACT_TOL
        && (v2_true - v2_model).abs() <= k * eps2 + EXACT_TOL;
    Ok(TrialReport {
        trial,
        seed,
        n: cfg.n_samples,
        k: cfg.extra_samples,
        inputs,
        eps_m1_pi2,
        nominal_c: general.bound_c,
        conservative_c: general.conservative_c,
        refined,
        actual_gap,
        ceiling_gap,
        ceiling_bound,
        equality_residual: (v1_model - v1_true - k * eps1).abs(),
        bias_requirement_holds: bias_requirement_holds(&inputs, eps2),
        inputs_consistent: inputs.is_consistent(),
        simulation_ok,
        conservative_ok: actual_gap >= general.conservative_c - EXACT_TOL,
        refined_conservative_ok: !refined.constraint_satisfied
            || actual_gap >= refined.conservative_c - EXACT_TOL,
        ceiling_ok: ceiling_gap <= ceiling_bound + EXACT_TOL,
        nominal_c_ok: actual_gap >= general.bound_c - EXACT_TOL,
    })
}

pub const CAMPAIGN_CSV_HEADER: [&str; 21] = [
    "trial",
    "seed",
    "n",
    "k",
    "kappa",
    "eps_opt",
    "eps_m1_pi1",
    "eps_m2_pi2",
    "sigma",
    "nominal_c",
    "conservative_c",
    "refined_c",
    "refined_conservative_c",
    "actual_gap",
    "constraint_lhs",
    "ceiling_gap",
    "ceiling_bound",
    "equality_residual",
    "bias_requirement_holds",
    "nominal_c_ok",
    "passed",
];

/// One CSV row per trial.
pub fn write_campaign_csv<W: Write>(out: W, reports: &[TrialReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CAMPAIGN_CSV_HEADER)?;
    for r in reports {
        w.write_record([
            r.trial.to_string(),
            r.seed.to_string(),
            r.n.to_string(),
            r.k.to_string(),
            r.inputs.kappa.to_string(),
            r.inputs.eps_opt.to_string(),
            r.inputs.eps_m1_pi1.to_string(),
            r.inputs.eps_m2_pi2.to_string(),
            r.inputs.sigma.to_string(),
            r.nominal_c.to_string(),
            r.conservative_c.to_string(),
            r.refined.bound_c.to_string(),
            r.refined.conservative_c.to_string(),
            r.actual_gap.to_string(),
            r.refined.constraint_lhs.to_string(),
            r.ceiling_gap.to_string(),
            r.ceiling_bound.to_string(),
            r.equality_residual.to_string(),
            r.bias_requirement_holds.to_string(),
            r.nominal_c_ok.to_string(),
            r.passed().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Empirical check of the L1 concentration bound on one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationCell {
    pub alphabet: u32,
    pub m: u64,
    pub eps: f64,
    pub draws: u64,
    pub bound: f64,
    pub violations: u64,
    pub frequency: f64,
    pub std_err: f64,
    /// `frequency ≤ bound + 3·std_err`.
    pub ok: bool,
}

/// Draws `draws` empirical distributions of `m` samples each from a
/// Dirichlet(1)-random distribution over `alphabet` symbols and counts how
/// often `‖p̂ − p‖₁ ≥ ε`.
pub fn concentration_cell(alphabet: u32, m: u64, eps: f64, draws: u64, seed: u64) -> Result<ConcentrationCell> {
    let bound = l1_concentration_bound(m, eps, alphabet)?;
    if draws == 0 {
        return Err(Error::invalid("concentration draws", "must be >= 1"));
    }
    let mut r = rng::seeded(seed);
    let weights: Vec<f64> = (0..alphabet).map(|_| Exp1.sample(&mut r)).collect();
    let total: f64 = weights.iter().sum();
    let p: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut violations = 0u64;
    let mut counts = vec![0u64; p.len()];
    for _ in 0..draws {
        multinomial(&mut r, m, &p, &mut counts)?;
        let l1: f64 = counts.iter().zip(&p).map(|(&c, q)| (c as f64 / m as f64 - q).abs()).sum();
        if l1 >= eps {
            violations += 1;
        }
    }
    let frequency = violations as f64 / draws as f64;
    let std_err = (frequency * (1.0 - frequency) / draws as f64).sqrt();
    Ok(ConcentrationCell {
        alphabet,
        m,
        eps,
        draws,
        bound,
        violations,
        frequency,
        std_err,
        ok: frequency <= bound + 3.0 * std_err,
    })
}

/// Multinomial counts through a chain of conditional binomials.
fn multinomial(r: &mut rng::Rng, n: u64, p: &[f64], out: &mut [u64]) -> Result<()> {
    let mut left = n;
    let mut mass = 1.0;
    for (i, (o, &q)) in out.iter_mut().zip(p).enumerate() {
        if i + 1 == p.len() || left == 0 {
            *o = left;
            left = 0;
            continue;
        }
        let prob = (q / mass).clamp(0.0, 1.0);
        *o = Binomial::new(left, prob)
            .map_err(|e| Error::NumericalFailure(format!("binomial: {e}")))?
            .sample(r);
        left -= *o;
        mass -= q;
    }
    Ok(())
}

/// Setup of the sample-interval check over random tabular instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalCampaignConfig {
    pub instances: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub xi: f64,
    pub seed: u64,
}

impl Default for IntervalCampaignConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            n_states: 5,
            n_actions: 2,
            gamma: 0.9,
            xi: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalTrial {
    pub instance: usize,
    pub query: IntervalQuery,
    pub epsilon: f64,
    pub k: u64,
    /// Largest `‖P(·|s,a) − P̂(·|s,a)‖₁` over all pairs after `N + k` draws.
    pub max_l1: f64,
    pub within: bool,
}

/// For each instance, draws a feasible query at random, takes `N + k`
/// samples per pair with `k` from [`sample_interval_k`] and records whether
/// every empirical row lands within `ε` in L1.
pub fn interval_campaign(cfg: &IntervalCampaignConfig) -> Result<Vec<IntervalTrial>> {
    if cfg.n_states < 2 || cfg.n_states > 32 || cfg.n_actions == 0 || cfg.n_actions > 16 {
        return Err(Error::invalid("interval campaign", "need 2..=32 states and 1..=16 actions"));
    }
    if !(cfg.xi > 0.0 && cfg.xi < 1.0) {
        return Err(Error::invalid("interval campaign", "xi must lie in (0, 1)"));
    }
    (0..cfg.instances)
        .into_par_iter()
        .map(|i| {
            let seed = rng::derive(cfg.seed, i as u64);
            let truth = Arc::new(random_mdp(cfg.n_states, cfg.n_actions, cfg.gamma, 1.0, rng::derive(seed, 0))?);
            let mut r = rng::child(seed, 1);
            let rb = truth.reward_bound().max(1e-12);
            let mut query = IntervalQuery {
                delta_m1: r.gen_range(0.3..0.8),
                sigma: r.gen_range(0.0..0.05),
                eps_opt: r.gen_range(0.0..1.0) * rb,
                lipschitz: rb / (1.0 - cfg.gamma),
                reward_bound: rb,
                gamma: cfg.gamma,
                vol_s: cfg.n_states as u32,
                xi: cfg.xi,
                n_existing: 0,
            };
            let full = sample_interval_k(&query)?;
            query.n_existing = r.gen_range(0..=full / 2);
            let k = sample_interval_k(&query)?;
            let total = query.n_existing + k;
            let counts = GenerativeSampler::new(truth.clone(), rng::derive(seed, 2)).draw_all(total)?;
            let model = build_empirical_model(&counts, &truth)?;
            let max_l1 = truth.max_row_l1(&model)?;
            let epsilon = query.epsilon();
            Ok(IntervalTrial {
                instance: i,
                query,
                epsilon,
                k,
                max_l1,
                within: max_l1 <= epsilon,
            })
        })
        .collect()
}

/// Fraction of trials within `ε` and the pass threshold
/// `1 − ξ − 3·sqrt(ξ(1−ξ)/n)`.
pub fn interval_success(trials: &[IntervalTrial], xi: f64) -> (f64, f64) {
    let n = trials.len().max(1) as f64;
    let frac = trials.iter().filter(|t| t.within).count() as f64 / n;
    (frac, 1.0 - xi - 3.0 * (xi * (1.0 - xi) / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn inputs() -> BoundInputs {
        BoundInputs {
            gamma: 0.9,
            reward_bound: 1.0,
            kappa: 180.0,
            lipschitz: 10.0,
            eps_opt: 0.0,
            eps_m1_pi1: 0.0,
            eps_m2_pi2: 0.0,
            ceiling_v1: 0.0,
            ceiling_v2: 0.0,
            sigma: 0.0,
        }
    }

    #[test]
    fn kappa_values() {
        assert_abs_diff_eq!(kappa(0.9, 1.0).unwrap(), 180.0, epsilon = 1e-9);
        assert_abs_diff_eq!(kappa(0.99, 1.0).unwrap(), 19800.0, epsilon = 1e-6);
        assert_eq!(kappa(0.5, 0.0).unwrap(), 0.0);
        assert!(kappa(1.0, 1.0).is_err());
        assert!(kappa(0.0, 1.0).is_err());
    }

    #[test]
    fn general_bound_arithmetic() {
        assert_eq!(gap_lower_bound(&inputs()).bound_c, 0.0);
        let i = BoundInputs {
            ceiling_v2: 1.0,
            eps_opt: 0.1,
            ..inputs()
        };
        assert_abs_diff_eq!(gap_lower_bound(&i).bound_c, 0.9, epsilon = 1e-15);
        let i = BoundInputs {
            eps_m1_pi1: 0.01,
            eps_m2_pi2: 0.002,
            ..i
        };
        let g = gap_lower_bound(&i);
        assert_abs_diff_eq!(g.bound_c, 180.0 * 0.008 + 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(g.conservative_c, -180.0 * 0.012 + 0.9, epsilon = 1e-12);
    }

    #[test]
    fn ceiling_bound_rejects_small_lipschitz() {
        let m = crate::envs::random_mdp(3, 2, 0.9, 1.0, 0).unwrap();
        assert!(matches!(
            ceiling_gap_bound(&m, &m, 5.0, 0.9),
            Err(Error::InvalidLipschitz { .. })
        ));
        assert_eq!(ceiling_gap_bound(&m, &m, 10.0, 0.9).unwrap(), 0.0);
    }

    #[test]
    fn refined_bound_constraint_edges() {
        let m1 = crate::envs::random_mdp(3, 2, 0.9, 1.0, 0).unwrap();
        let r = shift_constrained_bound(&inputs(), &m1, &m1).unwrap();
        assert_eq!(r.constraint_lhs, 0.0);
        assert!(r.constraint_satisfied);
        let m2 = crate::envs::random_mdp(3, 2, 0.9, 1.0, 1)
            .unwrap();
        let m2 = m1.with_transition(m2.transition().to_vec()).unwrap();
        let r = shift_constrained_bound(&inputs(), &m1, &m2).unwrap();
        assert!(r.constraint_lhs > 0.0);
        assert!(!r.constraint_satisfied);
        let i = BoundInputs {
            sigma: 0.1,
            ..inputs()
        };
        let r = shift_constrained_bound(&i, &m1, &m1).unwrap();
        assert_abs_diff_eq!(r.bound_c, -9.0 * 10.0 * 0.2, epsilon = 1e-12);
    }

    #[test]
    fn r1_examples() {
        let i = BoundInputs {
            eps_m1_pi1: 0.1,
            sigma: 0.001,
            ..inputs()
        };
        assert!(bias_requirement_holds(&i, 0.0));
        assert!(!bias_requirement_holds(&i, 0.1));
    }

    #[test]
    fn interval_k_reference_value() {
        // ε = 0.1 is reached with δ = 0.1 and no shift or oracle budget.
        let q = IntervalQuery {
            delta_m1: 0.1,
            sigma: 0.0,
            eps_opt: 0.0,
            lipschitz: 10.0,
            reward_bound: 1.0,
            gamma: 0.9,
            vol_s: 4,
            xi: 0.05,
            n_existing: 100,
        };
        assert_eq!(sample_interval_k(&q).unwrap(), 1027);
        let q = IntervalQuery { n_existing: 5000, ..q };
        assert_eq!(sample_interval_k(&q).unwrap(), 0);
        let q = IntervalQuery { sigma: 0.1, ..q };
        assert!(matches!(
            sample_interval_k(&q),
            Err(Error::InfeasibleInterval { .. })
        ));
    }

    #[test]
    fn interval_k_boundary_is_zero() {
        // vol 2, ξ = 2/e² gives ln(2/ξ) = 2; ε² = 4/N makes the count exactly N.
        let n = 400u64;
        let q = IntervalQuery {
            delta_m1: 0.1,
            sigma: 0.0,
            eps_opt: 0.0,
            lipschitz: 10.0,
            reward_bound: 1.0,
            gamma: 0.9,
            vol_s: 2,
            xi: 2.0 * (-2.0_f64).exp(),
            n_existing: n,
        };
        assert_eq!(sample_interval_k(&q).unwrap(), 0);
        let q = IntervalQuery { n_existing: n - 1, ..q };
        assert_eq!(sample_interval_k(&q).unwrap(), 1);
    }

    #[test]
    fn concentration_values() {
        assert_abs_diff_eq!(
            l1_concentration_bound(50, 0.2, 2).unwrap(),
            2.0 * (-1.0_f64).exp(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            l1_concentration_bound(200, 0.3, 4).unwrap(),
            14.0 * (-9.0_f64).exp(),
            epsilon = 1e-15
        );
        assert!(l1_concentration_bound(10, 100.0, 4).unwrap() < 1e-300);
        assert_eq!(l1_concentration_bound(1, 0.01, 8).unwrap(), 1.0);
        assert!(l1_concentration_bound(0, 0.1, 4).is_err());
        assert!(l1_concentration_bound(1, 0.1, 1).is_err());
    }

    #[test]
    fn campaign_edges() {
        let cfg = CampaignConfig {
            trials: 0,
            ..CampaignConfig::default()
        };
        assert!(verify_gap_campaign(&cfg).unwrap().is_empty());

        let cfg = CampaignConfig {
            trials: 1,
            extra_samples: 0,
            ..CampaignConfig::default()
        };
        let r = &verify_gap_campaign(&cfg).unwrap()[0];
        assert_eq!(r.actual_gap, 0.0);
        assert_eq!(r.refined.constraint_lhs, 0.0);
        assert_abs_diff_eq!(r.nominal_c, -r.inputs.eps_opt, epsilon = 1e-15);
        assert!(r.nominal_c <= 0.0);
        assert!(r.passed());
    }

    #[test]
    fn corrupted_kappa_is_caught() {
        let cfg = CampaignConfig {
            trials: 3,
            kappa_scale: 0.5,
            ..CampaignConfig::default()
        };
        let reports = verify_gap_campaign(&cfg).unwrap();
        assert!(reports.iter().all(|r| !r.inputs_consistent && !r.passed()));
    }
}
