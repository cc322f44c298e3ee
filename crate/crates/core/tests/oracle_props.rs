use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcrl_core::envs::{dirichlet_row, random_behavior, random_mdp, RandomMdpShape};
use rcrl_core::oracle::{
    conditional_mean_dominance_check, exact_pi_delta_from, exact_rtg_distribution, monte_carlo_value, policy_value,
    theorem2_suite, trajectory_kl, trajectory_kl_recursive, ReturnLaw, TimePolicy, SUITE_DELTAS,
};
use rcrl_core::Mdp;

/// Discounted return atoms from `(t, s)` onward when `a` is taken first and
/// `beta` afterwards, by explicit path enumeration.
fn enumerate_returns(mdp: &Mdp, beta: &[Vec<f64>], t: usize, s: usize, a: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for sn in 0..mdp.n_states() {
        let p = mdp.prob(s, a, sn);
        if p == 0.0 {
            continue;
        }
        let r = mdp.reward(s, a, sn);
        if t + 1 == mdp.horizon() || mdp.is_terminal(sn) {
            out.push((r, p));
            continue;
        }
        for (an, pa) in beta[sn].iter().enumerate() {
            if *pa == 0.0 {
                continue;
            }
            for (g, q) in enumerate_returns(mdp, beta, t + 1, sn, an) {
                out.push((r + mdp.discount() * g, p * pa * q));
            }
        }
    }
    out
}

fn instance(seed: u64) -> (Mdp, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = RandomMdpShape::draw(&mut rng);
    let mdp = random_mdp(rng.random(), shape).unwrap();
    let beta = random_behavior(rng.random(), &mdp);
    (mdp, beta)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn conditional_mean_dominates(
        atoms in prop::collection::vec((-10.0f64..10.0, 0.001f64..1.0), 1..12),
        pick in 0usize..12,
    ) {
        let values: Vec<f64> = atoms.iter().map(|a| a.0).collect();
        let probs: Vec<f64> = atoms.iter().map(|a| a.1).collect();
        let c = values[pick % values.len()];
        prop_assert!(conditional_mean_dominance_check(&values, &probs, c).unwrap());
    }

    #[test]
    fn return_law_threshold_is_feasible(
        atoms in prop::collection::vec((0.0f64..5.0, 0.001f64..1.0), 1..10),
        delta in 0.001f64..1.0,
    ) {
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        let law = ReturnLaw::from_atoms(atoms.iter().map(|&(v, p)| (v, p / total)).collect());
        let theta = law.threshold(delta);
        prop_assert!(law.tail(theta) >= delta - 1e-12);
        // Nothing above the threshold is feasible.
        for &v in law.support().iter().filter(|v| **v > theta) {
            prop_assert!(law.tail(v) < delta);
        }
    }
}

proptest! {
    #[test]
    fn dirichlet_rows_are_distributions(seed in any::<u64>(), n in 1usize..8) {
        let row = dirichlet_row(&mut ChaCha8Rng::seed_from_u64(seed), n);
        prop_assert_eq!(row.len(), n);
        prop_assert!(row.iter().all(|p| *p >= 0.0));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rtg_law_matches_path_enumeration(seed in 0u64..200) {
        let (mdp, beta) = instance(seed);
        let dist = exact_rtg_distribution(&mdp, &beta).unwrap();
        let s0 = mdp.initial_state();
        for a in 0..mdp.n_actions() {
            let paths = enumerate_returns(&mdp, &beta, 0, s0, a);
            let law = dist.law(0, s0, a);
            let mean: f64 = paths.iter().map(|(g, p)| g * p).sum();
            prop_assert!((law.mean() - mean).abs() < 1e-9);
            for &x in law.support() {
                let mass: f64 = paths.iter().filter(|(g, _)| (g - x).abs() < 1e-9).map(|(_, p)| p).sum();
                prop_assert!((law.mass_at(x) - mass).abs() < 1e-9, "x={} {} vs {}", x, law.mass_at(x), mass);
            }
        }
    }

    #[test]
    fn kl_enumeration_matches_recursion(seed in 0u64..200, delta in 0.05f64..1.0) {
        let (mdp, beta) = instance(seed);
        let dist = exact_rtg_distribution(&mdp, &beta).unwrap();
        let pi = exact_pi_delta_from(&dist, &beta, delta);
        let beta_tp = TimePolicy::stationary(&beta, mdp.horizon());
        let a = trajectory_kl(&mdp, &pi, &beta_tp).unwrap();
        let b = trajectory_kl_recursive(&mdp, &pi, &beta_tp).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }
}

#[test]
fn exact_value_agrees_with_monte_carlo() {
    for seed in 0..10 {
        let (mdp, beta) = instance(seed);
        let dist = exact_rtg_distribution(&mdp, &beta).unwrap();
        for pi in [
            TimePolicy::stationary(&beta, mdp.horizon()),
            exact_pi_delta_from(&dist, &beta, 0.3),
        ] {
            let exact = policy_value(&mdp, &pi).unwrap()[mdp.initial_state()];
            let (mc, se) = monte_carlo_value(&mdp, &pi, 20_000, seed);
            assert!((exact - mc).abs() <= 3.0 * se + 1e-9, "seed {seed}: {exact} vs {mc} ± {se}");
        }
    }
}

#[test]
fn kl_bound_holds_on_the_suite() {
    let cells = theorem2_suite(50, 0, &SUITE_DELTAS).unwrap();
    assert_eq!(cells.len(), 50 * SUITE_DELTAS.len());
    for c in &cells {
        assert!(c.kl >= -1e-12);
        assert!(c.kl_holds(), "instance {} delta {}: {} > {}", c.instance_seed, c.delta, c.kl, c.kl_bound);
    }
}

#[test]
fn suite_is_deterministic() {
    assert_eq!(theorem2_suite(5, 7, &[0.2]).unwrap(), theorem2_suite(5, 7, &[0.2]).unwrap());
}
