use approx::assert_abs_diff_eq;
use cmlo_core::bounds::kappa;
use cmlo_core::envs::{chain_mdp, random_mdp};
use cmlo_core::mdp::{
    build_empirical_model, model_inconsistency, policy_evaluation, tv_distance, value_iteration,
    visitation_distribution, EvalContext, TabularMdp, TabularPolicy,
};
use cmlo_core::rng;
use proptest::prelude::*;
use rand::Rng;

/// Repeated Bellman backups until the update is below `1e-14`.
fn oracle_values(m: &TabularMdp, pi: &TabularPolicy) -> Vec<f64> {
    let n = m.n_states();
    let mut v = vec![0.0; n];
    loop {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..m.n_actions())
                    .map(|a| {
                        let cont: f64 = m.row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                        pi.prob(s, a) * (m.reward(s, a) + m.gamma() * cont)
                    })
                    .sum()
            })
            .collect();
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if diff < 1e-14 {
            return v;
        }
    }
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// State occupancy from `dᵀ (I − γP_π) = (1−γ) μᵀ`.
fn oracle_state_occupancy(m: &TabularMdp, pi: &TabularPolicy, mu: &[f64]) -> Vec<f64> {
    let n = m.n_states();
    let g = m.gamma();
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            // transpose of (I − γ P_π)
            let p: f64 = (0..m.n_actions()).map(|u| pi.prob(j, u) * m.row(j, u)[i]).sum();
            *cell = if i == j { 1.0 } else { 0.0 } - g * p;
        }
    }
    solve(a, mu.iter().map(|x| (1.0 - g) * x).collect())
}

fn random_policy(n: usize, na: usize, seed: u64) -> TabularPolicy {
    let mut r = rng::seeded(seed);
    let mut probs = Vec::with_capacity(n * na);
    for _ in 0..n {
        let w: Vec<f64> = (0..na).map(|_| r.gen_range(0.0..1.0_f64) + 1e-3).collect();
        let s: f64 = w.iter().sum();
        probs.extend(w.iter().map(|x| x / s));
    }
    TabularPolicy::new(n, na, probs).unwrap()
}

fn random_dist(n: usize, r: &mut rng::Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0_f64)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn all_deterministic(n: usize, na: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..na).map(move |a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    out
}

#[test]
fn evaluation_matches_bellman_backups() {
    for seed in 0..50 {
        let m = random_mdp(6, 3, 0.9, 0.7, seed).unwrap();
        let pi = random_policy(6, 3, seed + 100);
        let ctx = EvalContext::uniform(6);
        let (table, ret) = policy_evaluation(&m, &pi, &ctx).unwrap();
        let v = oracle_values(&m, &pi);
        for (a, b) in table.values.iter().zip(&v) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(ret, v.iter().sum::<f64>() / 6.0, epsilon = 1e-10);
        assert!(table.residual < 1e-12);
    }
}

#[test]
fn chain_values_in_closed_form() {
    // no slip: the last state is absorbing with reward 1
    let m = chain_mdp(4, 0.8, 0.0).unwrap();
    let pi = TabularPolicy::deterministic(2, &[1, 1, 1, 1]).unwrap();
    let (v, _) = policy_evaluation(&m, &pi, &EvalContext::point(4, 0)).unwrap();
    for s in 0..4 {
        let steps = 3 - s;
        assert_abs_diff_eq!(v.values[s], 0.8_f64.powi(steps as i32) / 0.2, epsilon = 1e-12);
    }
}

#[test]
fn occupancy_matches_linear_solve() {
    let mut r = rng::seeded(7);
    for seed in 0..30 {
        let m = random_mdp(5, 2, 0.85, 1.0, seed).unwrap();
        let pi = random_policy(5, 2, seed + 1);
        let mu = random_dist(5, &mut r);
        let ctx = EvalContext::new(mu.clone()).unwrap();
        let d = visitation_distribution(&m, &pi, &ctx).unwrap();
        let states = oracle_state_occupancy(&m, &pi, &mu);
        for s in 0..5 {
            for a in 0..2 {
                assert_abs_diff_eq!(d.at(s, a), states[s] * pi.prob(s, a), epsilon = 1e-11);
            }
        }
        assert_abs_diff_eq!(d.density.iter().sum::<f64>(), 1.0, epsilon = 1e-11);
        // Σ d(s,a) r(s,a) = (1−γ) V^π(μ)
        let (_, ret) = policy_evaluation(&m, &pi, &ctx).unwrap();
        let dr: f64 = (0..5).flat_map(|s| (0..2).map(move |a| (s, a))).map(|(s, a)| d.at(s, a) * m.reward(s, a)).sum();
        assert_abs_diff_eq!(dr, (1.0 - 0.85) * ret, epsilon = 1e-10);
    }
}

#[test]
fn value_iteration_matches_policy_enumeration() {
    for seed in 0..40 {
        let m = random_mdp(5, 3, 0.9, 1.0, seed).unwrap();
        let ctx = EvalContext::uniform(5);
        let best = all_deterministic(5, 3)
            .iter()
            .map(|acts| {
                let pi = TabularPolicy::deterministic(3, acts).unwrap();
                policy_evaluation(&m, &pi, &ctx).unwrap().1
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let sol = value_iteration(&m, 1e-12).unwrap();
        let bound = 0.9 * 1e-12 / 0.1;
        assert!((sol.table_return(&ctx) - best).abs() <= bound + 1e-10);
        let greedy = sol.greedy_return(&m, &ctx).unwrap();
        assert!(greedy >= best - sol.eps_opt - 1e-10);
    }
}

#[test]
fn loose_tolerance_still_certified() {
    for seed in 0..200 {
        let m = random_mdp(8, 3, 0.95, 0.5, seed).unwrap();
        let ctx = EvalContext::uniform(8);
        let exact = value_iteration(&m, 1e-12).unwrap().table_return(&ctx);
        let rough = value_iteration(&m, 1e-2).unwrap();
        let got = rough.greedy_return(&m, &ctx).unwrap();
        assert!(got >= exact - rough.eps_opt - 1e-9, "seed {seed}");
    }
}

#[test]
fn tv_is_half_l1_and_symmetric() {
    let mut r = rng::seeded(1);
    for _ in 0..1000 {
        let n = r.gen_range(1..12);
        let p = random_dist(n, &mut r);
        let q = random_dist(n, &mut r);
        let l1: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
        let tv = tv_distance(&p, &q).unwrap();
        assert!((tv - 0.5 * l1).abs() <= 1e-12);
        assert_eq!(tv, tv_distance(&q, &p).unwrap());
        assert!((0.0..=1.0 + 1e-12).contains(&tv));
    }
    assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
}

#[test]
fn inconsistency_of_identical_models_is_zero() {
    let m = random_mdp(5, 2, 0.9, 1.0, 3).unwrap();
    let pi = TabularPolicy::uniform(5, 2);
    let eps = model_inconsistency(&m, &m, &pi, &EvalContext::uniform(5)).unwrap();
    assert_eq!(eps, 0.0);
}

#[test]
fn inconsistency_of_a_single_perturbed_row() {
    // one state, so the occupancy is all on (0, a)
    let truth = TabularMdp::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 0.5, 0.0).unwrap();
    let model = truth.with_transition(vec![0.6, 0.4, 0.0, 1.0]).unwrap();
    let pi = TabularPolicy::uniform(2, 1);
    let eps = model_inconsistency(&truth, &model, &pi, &EvalContext::point(2, 0)).unwrap();
    assert_abs_diff_eq!(eps, 0.4, epsilon = 1e-12);
}

#[test]
fn rejects_malformed_mdps() {
    assert!(TabularMdp::new(2, 1, vec![0.5, 0.4, 0.0, 1.0], vec![0.0, 0.0], 0.9, 1.0).is_err());
    assert!(TabularMdp::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 2.0], 0.9, 1.0).is_err());
    assert!(TabularMdp::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 1.0, 1.0).is_err());
    assert!(TabularMdp::new(2, 1, vec![1.0, 0.0], vec![0.0, 0.0], 0.9, 1.0).is_err());
    assert!(TabularMdp::new(0, 1, vec![], vec![], 0.9, 1.0).is_err());
    assert!(TabularPolicy::new(1, 2, vec![0.7, 0.7]).is_err());
    assert!(EvalContext::new(vec![0.5, 0.6]).is_err());
}

#[test]
fn json_round_trip() {
    let m = random_mdp(4, 2, 0.9, 0.5, 11).unwrap();
    let text = serde_json::to_string(&m).unwrap();
    let back: TabularMdp = serde_json::from_str(&text).unwrap();
    assert_eq!(m, back);
    let bad = text.replace("\"gamma\"", "\"gama\"");
    assert!(serde_json::from_str::<TabularMdp>(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simulation_gap_within_kappa_eps(
        n in 1usize..=10,
        na in 1usize..=3,
        gamma in 0.5f64..0.97,
        samples in 1u64..30,
        seed in any::<u64>(),
    ) {
        let truth = random_mdp(n, na, gamma, 1.0, seed).unwrap();
        let mut r = rng::child(seed, 1);
        let counts: Vec<u64> = truth
            .transition()
            .chunks(n)
            .flat_map(|row| {
                let mut c = vec![0u64; n];
                for _ in 0..samples {
                    let u: f64 = r.gen_range(0.0..1.0);
                    let mut acc = 0.0;
                    let mut k = n - 1;
                    for (j, p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            k = j;
                            break;
                        }
                    }
                    c[k] += 1;
                }
                c
            })
            .collect();
        let model = build_empirical_model(&counts, &truth).unwrap();
        let pi = random_policy(n, na, seed ^ 0x5555);
        let ctx = EvalContext::uniform(n);
        let (_, v) = policy_evaluation(&truth, &pi, &ctx).unwrap();
        let (_, vm) = policy_evaluation(&model, &pi, &ctx).unwrap();
        let eps = model_inconsistency(&truth, &model, &pi, &ctx).unwrap();
        let k = kappa(gamma, truth.reward_bound()).unwrap();
        prop_assert!((v - vm).abs() <= k * eps + 1e-9);
    }

    #[test]
    fn occupancy_is_a_distribution(n in 1usize..8, na in 1usize..4, seed in any::<u64>()) {
        let m = random_mdp(n, na, 0.9, 0.6, seed).unwrap();
        let pi = random_policy(n, na, seed.wrapping_add(1));
        let d = visitation_distribution(&m, &pi, &EvalContext::uniform(n)).unwrap();
        prop_assert!(d.density.iter().all(|x| *x >= 0.0));
        prop_assert!((d.density.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}
