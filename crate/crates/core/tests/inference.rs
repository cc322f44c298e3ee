use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcrl_core::envs::{bandit, bandit_fig1, chain, generate_dataset, stairs, stairs_fig2, BehaviorPolicy, EnvSpec, NoHook};
use rcrl_core::inference::{
    adaptive_energies, adaptive_policy_probs, dfo_minimize, dt_scheduler_update, estimate_rtg_marginal, evaluate,
    select_action, threshold_bucket, DfoConfig, InferenceConfig, Strategy, TableAgent,
};
use rcrl_core::model::{FactoredConfig, FactoredModel, FeatureSpec, Init, JointConfig, JointModel, PriorSpec};
use rcrl_core::oracle::{bucketed_joint, exact_pi_delta, exact_pi_delta_from, exact_rtg_distribution};
use rcrl_core::training::{train, TrainConfig};
use rcrl_core::util::{softmax, total_variation};
use rcrl_core::{Action, BayesModel, Obs};

fn exact_model(env: &EnvSpec, t: usize) -> JointModel {
    let beta = env.behavior.table(&env.mdp).unwrap();
    let dist = exact_rtg_distribution(&env.mdp, &beta).unwrap();
    let cfg = JointConfig {
        features: FeatureSpec::OneHot { n_states: env.mdp.n_states() },
        n_actions: env.mdp.n_actions(),
        buckets: env.buckets,
    };
    JointModel::from_joint_probs(cfg, &bucketed_joint(&dist, &beta, t, &env.buckets)).unwrap()
}

#[test]
fn boltzmann_policy_matches_exact_tail_posterior() {
    let env = bandit_fig1();
    let model = exact_model(&env, 0);
    let beta = env.behavior.table(&env.mdp).unwrap();
    for delta in [0.1, 0.4, 0.6, 0.95] {
        let exact = exact_pi_delta(&env.mdp, &beta, delta).unwrap();
        let p = adaptive_policy_probs(&model, &Obs::Index(bandit::START), delta).unwrap();
        assert!(total_variation(&p, exact.at(0, bandit::START)) < 1e-9, "delta {delta}");
    }
}

#[test]
fn boltzmann_identity_on_random_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = JointConfig {
        features: FeatureSpec::OneHot { n_states: 2 },
        n_actions: 4,
        buckets: rcrl_core::BucketSpec::new(0.0, 1.0, 7).unwrap(),
    };
    for _ in 0..50 {
        let mut m = JointModel::new(cfg, Init::Zero, 0).unwrap();
        for a in 0..4 {
            for b in 0..7 {
                m.set_table_logit(0, a, b, rng.random_range(-3.0..3.0));
            }
        }
        let s = Obs::Index(0);
        let marg = estimate_rtg_marginal(&m, &s, 0, &mut rng).unwrap();
        let k = threshold_bucket(&marg, 0.3);
        let e = adaptive_energies(&m, &s, k).unwrap();
        let boltzmann = softmax(&e.iter().map(|x| -x).collect::<Vec<_>>());
        let joint = m.joint_prob(&s).unwrap();
        let w: Vec<f64> = joint.iter().map(|row| row[k..].iter().sum()).collect();
        let z: f64 = w.iter().sum();
        let direct: Vec<f64> = w.iter().map(|x| x / z).collect();
        assert!(total_variation(&boltzmann, &direct) < 1e-9);
    }
}

#[test]
fn threshold_is_feasible_and_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.random_range(1..30);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let mut last = usize::MAX;
        for delta in [0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let k = threshold_bucket(&p, delta);
            assert!(p[k..].iter().sum::<f64>() >= delta - 1e-12);
            assert!(k <= last);
            last = k;
        }
    }
}

#[test]
fn sampled_marginal_is_close_to_exact() {
    let cfg = FactoredConfig {
        features: FeatureSpec::OneHot { n_states: 2 },
        prior: PriorSpec::Categorical { n_actions: 3 },
        buckets: rcrl_core::BucketSpec::new(0.0, 1.0, 6).unwrap(),
        head_width: 5,
    };
    let mut model = FactoredModel::new(cfg, Init::Default, 8).unwrap();
    let scaled: Vec<f64> = model.params().iter().map(|p| p * 200.0).collect();
    model.set_params(scaled).unwrap();
    let s = Obs::Index(1);
    let exact = estimate_rtg_marginal(&model, &s, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let actions = model.sample_prior(&s, 10_000, &mut rng).unwrap();
    let rows = model.rtg_probs(&s, &actions).unwrap();
    let mut sampled = vec![0.0; 6];
    for r in &rows {
        for (o, p) in sampled.iter_mut().zip(r) {
            *o += p / rows.len() as f64;
        }
    }
    assert!((exact.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(total_variation(&exact, &sampled) <= 0.02);
}

#[test]
fn exact_bandit_model_picks_up_at_delta_04() {
    let env = bandit_fig1();
    let model = exact_model(&env, 0);
    let cfg = InferenceConfig {
        delta: 0.4,
        eps_eval: 0.0,
        ..InferenceConfig::default()
    };
    // Both actions carry the same tail mass at R = 1; the tie goes to UP.
    let d = select_action(&model, &Obs::Index(bandit::START), &cfg, 0.0, &mut rand::rng()).unwrap();
    assert_eq!(d.action, Action::Discrete(bandit::UP));
    assert_eq!(d.target_rtg, 1.0);
}

#[test]
fn single_action_mdp_has_one_choice() {
    let cfg = JointConfig {
        features: FeatureSpec::OneHot { n_states: 1 },
        n_actions: 1,
        buckets: rcrl_core::BucketSpec::new(0.0, 1.0, 3).unwrap(),
    };
    let m = JointModel::new(cfg, Init::Default, 1).unwrap();
    for strategy in Strategy::ALL {
        let icfg = InferenceConfig { strategy, ..InferenceConfig::default() };
        let d = select_action(&m, &Obs::Index(0), &icfg, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d.action, Action::Discrete(0));
    }
}

#[test]
fn quadratic_bowl_is_found() {
    let cfg = DfoConfig::default().with_bounds(vec![(-1.0, 1.0), (-1.0, 1.0)]);
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
        let best = dfo_minimize(
            |xs| Ok(xs.iter().map(|x| (x[0] - target[0]).powi(2) + (x[1] - target[1]).powi(2)).collect()),
            &cfg,
            |n, rng| Ok((0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()),
            &mut rng,
        )
        .unwrap();
        if (best[0] - target[0]).abs() <= 0.05 && (best[1] - target[1]).abs() <= 0.05 {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn constant_energy_returns_an_in_bounds_candidate() {
    let cfg = DfoConfig::default().with_bounds(vec![(0.0, 0.1)]);
    let best = dfo_minimize(
        |xs| Ok(vec![1.0; xs.len()]),
        &cfg,
        |n, rng| Ok((0..n).map(|_| vec![rng.random_range(-5.0..5.0)]).collect()),
        &mut ChaCha8Rng::seed_from_u64(4),
    )
    .unwrap();
    assert!((0.0..=0.1).contains(&best[0]));
}

#[test]
fn exact_adaptive_policy_climbs_the_stairs() {
    let env = stairs_fig2();
    let beta = env.behavior.table(&env.mdp).unwrap();
    let pi = exact_pi_delta(&env.mdp, &beta, 0.1).unwrap();
    let trs = evaluate(&env.mdp, || Ok(TableAgent::greedy(&pi, 2)), 10, usize::MAX, 3, &NoHook).unwrap();
    for tr in trs {
        assert_eq!(tr.total_return(), 1.0);
        assert!(tr.steps.iter().all(|s| s.action == stairs::UP));
    }
}

#[test]
fn exact_rollout_target_equals_observed_on_a_deterministic_chain() {
    let env = chain(3).unwrap();
    let beta = vec![vec![0.5, 0.5]; env.mdp.n_states()];
    let dist = exact_rtg_distribution(&env.mdp, &beta).unwrap();
    let pi = exact_pi_delta_from(&dist, &beta, 0.1);
    let targets: Vec<Vec<f64>> = (0..3)
        .map(|t| (0..4).map(|s| dist.marginal(t, s).threshold(0.1)).collect())
        .collect();
    let agent = || {
        Ok(TableAgent {
            targets: Some(&targets),
            ..TableAgent::greedy(&pi, 2)
        })
    };
    for tr in evaluate(&env.mdp, agent, 5, usize::MAX, 0, &NoHook).unwrap() {
        for s in &tr.steps {
            assert!((s.target_rtg - s.observed_rtg).abs() < 1e-12);
        }
    }
}

#[test]
fn truncated_good_state_observes_less_than_target() {
    // Cut a chain short: the last reward is never collected.
    let env = chain(4).unwrap();
    let beta = vec![vec![0.5, 0.5]; env.mdp.n_states()];
    let dist = exact_rtg_distribution(&env.mdp, &beta).unwrap();
    let pi = exact_pi_delta_from(&dist, &beta, 0.05);
    let targets: Vec<Vec<f64>> = (0..4)
        .map(|t| (0..5).map(|s| dist.marginal(t, s).threshold(0.05)).collect())
        .collect();
    let agent = || {
        Ok(TableAgent {
            targets: Some(&targets),
            ..TableAgent::greedy(&pi, 2)
        })
    };
    let tr = &evaluate(&env.mdp, agent, 1, 3, 0, &NoHook).unwrap()[0];
    assert_eq!(tr.len(), 3);
    for s in &tr.steps {
        assert!(s.observed_rtg < s.target_rtg);
    }
}

#[test]
fn dt_scheduler_reproduces_remaining_return() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let gamma = rng.random_range(0.5..=1.0);
        let rewards: Vec<f64> = (0..rng.random_range(1..12)).map(|_| rng.random_range(-1.0..2.0)).collect();
        let rtg = rcrl_core::bucket::compute_rtg(&rewards, gamma);
        let mut target = rtg[0];
        for t in 0..rewards.len() {
            assert!((target - rtg[t]).abs() < 1e-9 * (1.0 + rtg[t].abs()) * (t + 1) as f64);
            target = dt_scheduler_update(target, rewards[t], gamma);
        }
    }
}

/// A converged tabular model's adaptive policy is close to the exact one.
#[test]
fn trained_model_matches_exact_pi_delta_on_chain() {
    let env = chain(3).unwrap();
    let beta = env.behavior.table(&env.mdp).unwrap();
    let ds = generate_dataset(&env.mdp, &BehaviorPolicy::Uniform, 4000, 5).unwrap();
    let cfg = JointConfig {
        features: FeatureSpec::OneHot { n_states: env.mdp.n_states() },
        n_actions: 2,
        buckets: env.buckets,
    };
    let tc = TrainConfig {
        n_iterations: 1500,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let (m, _) = train(&JointModel::new(cfg, Init::Default, 0).unwrap(), &ds, &tc).unwrap();
    let exact = exact_pi_delta(&env.mdp, &beta, 0.05).unwrap();
    for t in 0..3 {
        let p = adaptive_policy_probs(&m, &Obs::Index(t), 0.05).unwrap();
        assert!(total_variation(&p, exact.at(t, t)) < 0.05, "cell {t}: {p:?}");
    }
}
