use rcrl_core::baselines::{train_bc, train_vanilla, PolicyHead, VanillaConfig, VanillaModel};
use rcrl_core::envs::{bandit, bandit_fig1, chain, figure1_dataset, generate_dataset, BehaviorPolicy};
use rcrl_core::model::{FeatureSpec, Init};
use rcrl_core::training::TrainConfig;
use rcrl_core::util::total_variation;
use rcrl_core::{Action, Dataset, EnvSpec, Obs};

fn config(env: &EnvSpec, use_rtg: bool) -> VanillaConfig {
    VanillaConfig {
        features: FeatureSpec::OneHot { n_states: env.mdp.n_states() },
        head: PolicyHead::Discrete { n_actions: env.mdp.n_actions() },
        buckets: env.buckets,
        hidden_width: 0,
        use_rtg,
    }
}

fn fit_config(seed: u64) -> TrainConfig {
    TrainConfig {
        n_iterations: 1500,
        learning_rate: 0.02,
        batch_size: 1024,
        seed,
        ..TrainConfig::default()
    }
}

/// Empirical `p(a | s, bucket)` at the start state.
fn empirical_conditional(env: &EnvSpec, ds: &Dataset, bucket: usize) -> Vec<f64> {
    let mut counts = vec![0.0; env.mdp.n_actions()];
    for (tr, r) in ds.transitions().iter().zip(ds.rtg()) {
        if tr.state == Obs::Index(bandit::START) && env.buckets.discretize(*r) == bucket {
            counts[tr.action.index().unwrap()] += 1.0;
        }
    }
    let n: f64 = counts.iter().sum();
    counts.iter().map(|c| c / n).collect()
}

#[test]
fn figure1_vanilla_follows_the_noisy_samples() {
    let env = bandit_fig1();
    let (_, ds) = figure1_dataset();
    let win = env.buckets.discretize(1.0);
    for seed in 0..3 {
        let m = VanillaModel::new(config(&env, true), Init::Default, seed).unwrap();
        let (m, _) = train_vanilla(&m, &ds, &fit_config(seed)).unwrap();
        let p = m.action_probs(&Obs::Index(bandit::START), win).unwrap();
        assert!(p[bandit::UP] <= 0.1, "seed {seed}: {p:?}");
    }
}

#[test]
fn vanilla_conditionals_match_empirical_ones() {
    let env = bandit_fig1();
    let ds = generate_dataset(&env.mdp, &BehaviorPolicy::EpsGreedy { eps: 0.6 }, 400, 3).unwrap();
    let m = VanillaModel::new(config(&env, true), Init::Default, 0).unwrap();
    let (m, _) = train_vanilla(&m, &ds, &fit_config(0)).unwrap();
    for r in [0.0, 1.0] {
        let b = env.buckets.discretize(r);
        let model = m.action_probs(&Obs::Index(bandit::START), b).unwrap();
        let empirical = empirical_conditional(&env, &ds, b);
        assert!(total_variation(&model, &empirical) <= 0.05, "R={r}: {model:?} vs {empirical:?}");
    }
}

#[test]
fn bc_on_uniform_chain_data_is_near_uniform() {
    let env = chain(3).unwrap();
    let ds = generate_dataset(&env.mdp, &BehaviorPolicy::Uniform, 3400, 1).unwrap();
    assert!(ds.len() >= 10_000);
    let m = VanillaModel::new(config(&env, false), Init::Default, 0).unwrap();
    let (m, _) = train_bc(&m, &ds, &fit_config(2)).unwrap();
    for s in 0..env.mdp.n_states() {
        let p = m.action_probs(&Obs::Index(s), 0).unwrap();
        assert!(total_variation(&p, &[0.5, 0.5]) <= 0.05, "state {s}: {p:?}");
    }
}

#[test]
fn bc_recovers_a_deterministic_policy() {
    let env = chain(3).unwrap();
    let mut table = vec![vec![0.0, 1.0]; env.mdp.n_states()];
    table[1] = vec![1.0, 0.0];
    let ds = generate_dataset(&env.mdp, &BehaviorPolicy::Table(table.clone()), 50, 0).unwrap();
    let m = VanillaModel::new(config(&env, false), Init::Default, 0).unwrap();
    let (m, _) = train_bc(&m, &ds, &fit_config(0)).unwrap();
    for tr in ds.transitions() {
        let s = tr.state.index().unwrap();
        let p = m.action_probs(&tr.state, 0).unwrap();
        let greedy = if p[0] > p[1] { 0 } else { 1 };
        assert_eq!(Action::Discrete(greedy), tr.action, "state {s}");
    }
}

#[test]
fn bc_ignores_the_rtg_input() {
    let env = bandit_fig1();
    let (_, ds) = figure1_dataset();
    let m = VanillaModel::new(config(&env, false), Init::Default, 0).unwrap();
    let (m, _) = train_bc(&m, &ds, &fit_config(0)).unwrap();
    let s = Obs::Index(bandit::START);
    assert_eq!(m.action_probs(&s, 0).unwrap(), m.action_probs(&s, 10).unwrap());
}
