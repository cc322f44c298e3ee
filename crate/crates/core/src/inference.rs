//! Test-time action selection.
//!
//! The adaptive strategy conditions on the event `R >= theta_delta(s)`, where
//! the threshold is read off the model's own RTG marginal at `s`. The
//! `Max` and `DtScheduler` strategies condition on a single target bucket and
//! report when that bucket has (near) zero mass at the current state.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::VanillaModel;
use crate::bucket::BucketSpec;
use crate::dataset::{Action, Obs};
use crate::envs::{episode_rng, ActionHook, EnvState};
use crate::error::{Error, Result};
use crate::mdp::Mdp;
use crate::model::{ActionSpace, BayesModel};
use crate::oracle::TimePolicy;
use crate::util::{argmax, floored_ln, softmax, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Adaptive,
    Max,
    DtScheduler,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Adaptive, Strategy::Max, Strategy::DtScheduler];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "adaptive" => Ok(Strategy::Adaptive),
            "max" => Ok(Strategy::Max),
            "dt-scheduler" | "dt_scheduler" => Ok(Strategy::DtScheduler),
            _ => Err(Error::UnknownName {
                kind: "strategy",
                name: name.into(),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Adaptive => "adaptive",
            Strategy::Max => "max",
            Strategy::DtScheduler => "dt_scheduler",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DfoConfig {
    pub n_iters: usize,
    pub n_samples: usize,
    pub shrink: f64,
    pub noise_scale: f64,
    /// Per-dimension `(low, high)` action bounds.
    pub bounds: Vec<(f64, f64)>,
}

impl Default for DfoConfig {
    fn default() -> Self {
        Self {
            n_iters: 5,
            n_samples: 1024,
            shrink: 0.9,
            noise_scale: 0.5,
            bounds: vec![(-1.0, 1.0)],
        }
    }
}

impl DfoConfig {
    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iters < 1 {
            return Err(Error::InvalidConfig("dfo n_iters must be at least 1".into()));
        }
        if self.n_samples < 2 {
            return Err(Error::InvalidConfig("dfo n_samples must be at least 2".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidConfig(format!("dfo shrink must lie in (0,1), got {}", self.shrink)));
        }
        if self.noise_scale.is_nan() || self.noise_scale < 0.0 {
            return Err(Error::InvalidConfig("dfo noise_scale must be non-negative".into()));
        }
        if self.bounds.is_empty() || self.bounds.iter().any(|(lo, hi)| lo.is_nan() || hi.is_nan() || lo > hi) {
            return Err(Error::InvalidConfig("dfo bounds must be non-empty intervals".into()));
        }
        Ok(())
    }

    fn clip(&self, a: &mut [f64]) {
        for (x, (lo, hi)) in a.iter_mut().zip(&self.bounds) {
            *x = x.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub delta: f64,
    /// Prior samples for the RTG marginal of a continuous model.
    pub n_action_samples: usize,
    pub strategy: Strategy,
    pub eps_eval: f64,
    pub dfo: DfoConfig,
    /// Target-bucket marginal mass below which `Max` and `DtScheduler`
    /// report an OOD conditioning event.
    pub ood_mass: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            n_action_samples: 256,
            strategy: Strategy::Adaptive,
            eps_eval: 0.01,
            dfo: DfoConfig::default(),
            ood_mass: 1e-3,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if self.n_action_samples < 1 {
            return Err(Error::InvalidConfig("n_action_samples must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eps_eval) {
            return Err(Error::InvalidConfig(format!("eps_eval must lie in [0,1], got {}", self.eps_eval)));
        }
        if !(0.0..1.0).contains(&self.ood_mass) {
            return Err(Error::InvalidConfig("ood_mass must lie in [0,1)".into()));
        }
        self.dfo.validate()
    }
}

fn all_actions(model: &dyn BayesModel) -> Option<Vec<Action>> {
    model.action_space().all_actions()
}

/// `sum_a beta(a|s) beta(.|s,a)` for a discrete model and the Monte Carlo
/// average over `n` prior samples otherwise.
pub fn estimate_rtg_marginal(model: &dyn BayesModel, s: &Obs, n: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
    let nb = model.buckets().len();
    let mut out = vec![0.0; nb];
    match all_actions(model) {
        Some(actions) => {
            let lp = model.log_prior(s, &actions)?;
            for (l, row) in lp.iter().zip(model.rtg_probs(s, &actions)?) {
                let w = l.exp();
                for (o, p) in out.iter_mut().zip(row) {
                    *o += w * p;
                }
            }
            // The floored log prior can leave a tiny excess; renormalize.
            let z: f64 = out.iter().sum();
            out.iter_mut().for_each(|o| *o /= z);
        }
        None => {
            if n == 0 {
                return Err(Error::InvalidConfig("n_action_samples must be at least 1".into()));
            }
            let actions = model.sample_prior(s, n, rng)?;
            for row in model.rtg_probs(s, &actions)? {
                for (o, p) in out.iter_mut().zip(row) {
                    *o += p / n as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Index of the largest bucket whose inclusive upper tail holds at least `delta`.
pub fn threshold_bucket(marginal: &[f64], delta: f64) -> usize {
    let mut tail = 0.0;
    for k in (0..marginal.len()).rev() {
        tail += marginal[k];
        // Tolerate rounding in the accumulated tail.
        if tail >= delta - 1e-12 {
            return k;
        }
    }
    0
}

/// `theta_delta`: the center of [`threshold_bucket`].
pub fn threshold(marginal: &[f64], delta: f64, buckets: &BucketSpec) -> f64 {
    buckets.center_unchecked(threshold_bucket(marginal, delta))
}

/// `beta(R >= center(k) | s, a)` from one RTG row, floored.
pub fn tail_from_row(row: &[f64], k: usize) -> f64 {
    row[k..].iter().sum::<f64>().max(PROB_FLOOR)
}

pub fn tail_prob(model: &dyn BayesModel, s: &Obs, a: &Action, k: usize) -> Result<f64> {
    let row = &model.rtg_probs(s, std::slice::from_ref(a))?[0];
    Ok(tail_from_row(row, k))
}

/// `E^delta(a|s) = -log beta(a|s) - log beta(R >= theta | s, a)`.
pub fn adaptive_energy(model: &dyn BayesModel, s: &Obs, a: &Action, k: usize) -> Result<f64> {
    let lp = model.log_prior(s, std::slice::from_ref(a))?[0];
    Ok(-lp - tail_prob(model, s, a, k)?.ln())
}

/// Energies of every action of a discrete model at threshold bucket `k`.
pub fn adaptive_energies(model: &dyn BayesModel, s: &Obs, k: usize) -> Result<Vec<f64>> {
    let actions = all_actions(model).ok_or_else(|| Error::Unsupported("energy enumeration over continuous actions".into()))?;
    let lp = model.log_prior(s, &actions)?;
    let rows = model.rtg_probs(s, &actions)?;
    Ok(lp.iter().zip(&rows).map(|(l, r)| -l - tail_from_row(r, k).ln()).collect())
}

/// The Boltzmann policy `softmax(-E^delta)` of a discrete model.
pub fn adaptive_policy_probs(model: &dyn BayesModel, s: &Obs, delta: f64) -> Result<Vec<f64>> {
    let marginal = estimate_rtg_marginal(model, s, 0, &mut rand::rng())?;
    let k = threshold_bucket(&marginal, delta);
    let e = adaptive_energies(model, s, k)?;
    Ok(softmax(&e.iter().map(|x| -x).collect::<Vec<_>>()))
}

/// `(target - r) / gamma`: the remaining return once `r` has been collected.
pub fn dt_scheduler_update(target_rtg: f64, observed_reward: f64, gamma: f64) -> f64 {
    (target_rtg - observed_reward) / gamma
}

/// Sampling-based minimizer over a bounded box. `energy` scores a batch of
/// candidates; `sampler` draws the initial population.
pub fn dfo_minimize(
    mut energy: impl FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
    cfg: &DfoConfig,
    mut sampler: impl FnMut(usize, &mut dyn RngCore) -> Result<Vec<Vec<f64>>>,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut xs = sampler(cfg.n_samples, rng)?;
    for x in &mut xs {
        if x.len() != cfg.bounds.len() {
            return Err(Error::InvalidConfig(format!(
                "candidate has {} dimensions but bounds have {}",
                x.len(),
                cfg.bounds.len()
            )));
        }
        cfg.clip(x);
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let consider = |xs: &[Vec<f64>], es: &[f64], best: &mut Option<(f64, Vec<f64>)>| {
        let i = argmax(&es.iter().map(|e| -e).collect::<Vec<_>>());
        if best.as_ref().is_none_or(|(b, _)| es[i] < *b) {
            *best = Some((es[i], xs[i].clone()));
        }
    };
    let normal = rand_distr::StandardNormal;
    for i in 0..cfg.n_iters {
        let es = energy(&xs)?;
        consider(&xs, &es, &mut best);
        let w = softmax(&es.iter().map(|e| -e).collect::<Vec<_>>());
        let scale = cfg.noise_scale * cfg.shrink.powi(i as i32);
        xs = (0..xs.len())
            .map(|_| {
                let mut x = xs[crate::util::sample_index(&w, rng)].clone();
                for v in &mut x {
                    let z: f64 = rand_distr::Distribution::sample(&normal, rng);
                    *v += scale * z;
                }
                cfg.clip(&mut x);
                x
            })
            .collect();
    }
    let es = energy(&xs)?;
    consider(&xs, &es, &mut best);
    Ok(best.expect("at least two candidates").1)
}

/// One action choice with what it was conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    /// `theta_delta` for the adaptive strategy, the target RTG otherwise.
    pub target_rtg: f64,
    pub ood_event: bool,
}

/// A policy that can be rolled out in an environment.
pub trait Agent {
    /// Called before the first step of every episode.
    fn begin_episode(&mut self) {}

    fn act(&mut self, t: usize, s: &Obs, rng: &mut dyn RngCore) -> Result<Decision>;

    /// Called with the reward of the executed action.
    fn observe(&mut self, _reward: f64) {}
}

fn eps_override(eps: f64, space: ActionSpace, rng: &mut dyn RngCore) -> Option<Action> {
    match space {
        ActionSpace::Discrete { n } if eps > 0.0 && rng.random::<f64>() < eps => {
            Some(Action::Discrete(rng.random_range(0..n)))
        }
        _ => None,
    }
}

/// Selects one action under `cfg.strategy`. `target` is the current target
/// RTG of the `Max` and `DtScheduler` strategies and ignored otherwise.
pub fn select_action(
    model: &dyn BayesModel,
    s: &Obs,
    cfg: &InferenceConfig,
    target: f64,
    rng: &mut dyn RngCore,
) -> Result<Decision> {
    let buckets = *model.buckets();
    let mut decision = match cfg.strategy {
        Strategy::Adaptive => {
            let marginal = estimate_rtg_marginal(model, s, cfg.n_action_samples, rng)?;
            let k = threshold_bucket(&marginal, cfg.delta);
            let action = match all_actions(model) {
                Some(actions) => {
                    let e = adaptive_energies(model, s, k)?;
                    actions[argmax(&e.iter().map(|x| -x).collect::<Vec<_>>())].clone()
                }
                None => continuous_minimize(model, s, cfg, rng, |lp, row| -lp - tail_from_row(row, k).ln())?,
            };
            Decision {
                action,
                target_rtg: buckets.center_unchecked(k),
                ood_event: false,
            }
        }
        Strategy::Max | Strategy::DtScheduler => {
            let b = buckets.discretize(target);
            let marginal = estimate_rtg_marginal(model, s, cfg.n_action_samples, rng)?;
            let ood = marginal[b] < cfg.ood_mass;
            let action = match all_actions(model) {
                Some(actions) => {
                    let lp = model.log_prior(s, &actions)?;
                    let scores: Vec<f64> = if ood {
                        lp
                    } else {
                        let rows = model.rtg_probs(s, &actions)?;
                        lp.iter().zip(&rows).map(|(l, r)| l + floored_ln(r[b])).collect()
                    };
                    actions[argmax(&scores)].clone()
                }
                None if ood => continuous_minimize(model, s, cfg, rng, |lp, _| -lp)?,
                None => continuous_minimize(model, s, cfg, rng, |lp, row| -lp - floored_ln(row[b]))?,
            };
            Decision {
                action,
                target_rtg: buckets.clamp(target),
                ood_event: ood,
            }
        }
    };
    if let Some(a) = eps_override(cfg.eps_eval, model.action_space(), rng) {
        decision.action = a;
    }
    Ok(decision)
}

fn continuous_minimize(
    model: &dyn BayesModel,
    s: &Obs,
    cfg: &InferenceConfig,
    rng: &mut dyn RngCore,
    energy_of: impl Fn(f64, &[f64]) -> f64,
) -> Result<Action> {
    let to_actions = |xs: &[Vec<f64>]| xs.iter().cloned().map(Action::Continuous).collect::<Vec<_>>();
    let best = dfo_minimize(
        |xs| {
            let actions = to_actions(xs);
            let lp = model.log_prior(s, &actions)?;
            let rows = model.rtg_probs(s, &actions)?;
            Ok(lp.iter().zip(&rows).map(|(l, r)| energy_of(*l, r)).collect())
        },
        &cfg.dfo,
        |n, rng| {
            model
                .sample_prior(s, n, rng)?
                .into_iter()
                .map(|a| match a {
                    Action::Continuous(v) => Ok(v),
                    Action::Discrete(_) => Err(Error::Unsupported("dfo over discrete actions".into())),
                })
                .collect()
        },
        rng,
    )?;
    Ok(Action::Continuous(best))
}

/// A BR model under one of the three strategies.
pub struct BrAgent<'a> {
    model: &'a dyn BayesModel,
    cfg: InferenceConfig,
    initial_target: f64,
    gamma: f64,
    target: f64,
}

impl<'a> BrAgent<'a> {
    /// `initial_target` is the largest episode RTG of the training data.
    pub fn new(model: &'a dyn BayesModel, cfg: InferenceConfig, initial_target: f64, gamma: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            cfg,
            initial_target,
            gamma,
            target: initial_target,
        })
    }
}

impl Agent for BrAgent<'_> {
    fn begin_episode(&mut self) {
        self.target = self.initial_target;
    }

    fn act(&mut self, _t: usize, s: &Obs, rng: &mut dyn RngCore) -> Result<Decision> {
        select_action(self.model, s, &self.cfg, self.target, rng)
    }

    fn observe(&mut self, reward: f64) {
        if self.cfg.strategy == Strategy::DtScheduler {
            let next = dt_scheduler_update(self.target, reward, self.gamma);
            self.target = self.model.buckets().clamp(next);
        }
    }
}

/// A vanilla (or BC) policy fed a target RTG. Actions are the argmax of
/// the discrete head or the Gaussian mean.
pub struct VanillaAgent<'a> {
    model: &'a VanillaModel,
    strategy: Strategy,
    eps_eval: f64,
    initial_target: f64,
    gamma: f64,
    target: f64,
}

impl<'a> VanillaAgent<'a> {
    pub fn new(model: &'a VanillaModel, strategy: Strategy, eps_eval: f64, initial_target: f64, gamma: f64) -> Result<Self> {
        if strategy == Strategy::Adaptive {
            return Err(Error::Unsupported("adaptive inference needs a BR model".into()));
        }
        Ok(Self {
            model,
            strategy,
            eps_eval,
            initial_target,
            gamma,
            target: initial_target,
        })
    }
}

impl Agent for VanillaAgent<'_> {
    fn begin_episode(&mut self) {
        self.target = self.initial_target;
    }

    fn act(&mut self, _t: usize, s: &Obs, rng: &mut dyn RngCore) -> Result<Decision> {
        let buckets = self.model.config().buckets;
        let b = buckets.discretize(self.target);
        let action = match self.model.action_space() {
            ActionSpace::Discrete { .. } => Action::Discrete(argmax(&self.model.action_probs(s, b)?)),
            ActionSpace::Continuous { .. } => Action::Continuous(self.model.mean_action(s, b)?),
        };
        let action = eps_override(self.eps_eval, self.model.action_space(), rng).unwrap_or(action);
        Ok(Decision {
            action,
            target_rtg: buckets.clamp(self.target),
            ood_event: false,
        })
    }

    fn observe(&mut self, reward: f64) {
        if self.strategy == Strategy::DtScheduler {
            let next = dt_scheduler_update(self.target, reward, self.gamma);
            self.target = self.model.config().buckets.clamp(next);
        }
    }
}

/// Greedy execution of an exact time-indexed policy table.
pub struct TableAgent<'a> {
    pub policy: &'a TimePolicy,
    pub eps_eval: f64,
    pub n_actions: usize,
    /// Target recorded at `(t, s)`; NaN when absent.
    pub targets: Option<&'a [Vec<f64>]>,
}

impl<'a> TableAgent<'a> {
    pub fn greedy(policy: &'a TimePolicy, n_actions: usize) -> Self {
        Self {
            policy,
            eps_eval: 0.0,
            n_actions,
            targets: None,
        }
    }
}

impl Agent for TableAgent<'_> {
    fn act(&mut self, t: usize, s: &Obs, rng: &mut dyn RngCore) -> Result<Decision> {
        let state = s.index().ok_or_else(|| Error::Unsupported("table policies need tabular states".into()))?;
        let a = argmax(self.policy.at(t, state));
        let action = eps_override(self.eps_eval, ActionSpace::Discrete { n: self.n_actions }, rng)
            .unwrap_or(Action::Discrete(a));
        Ok(Decision {
            action,
            target_rtg: self.targets.map_or(f64::NAN, |tt| tt[t][state]),
            ood_event: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub target_rtg: f64,
    /// Realized discounted return from this step on.
    pub observed_rtg: f64,
    pub ood_event: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    /// Undiscounted sum of rewards.
    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn ood_events(&self) -> usize {
        self.steps.iter().filter(|s| s.ood_event).count()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs one episode of `agent` on a tabular MDP.
pub fn rollout(
    mdp: &Mdp,
    agent: &mut dyn Agent,
    max_steps: usize,
    rng: &mut dyn RngCore,
    hook: &dyn ActionHook,
) -> Result<Trajectory> {
    let mut env = EnvState::with_max_steps(mdp, max_steps);
    agent.begin_episode();
    let mut steps = Vec::new();
    while !env.is_done() {
        let t = env.t();
        let s = env.state();
        let d = agent.act(t, &Obs::Index(s), rng)?;
        let proposed = d
            .action
            .index()
            .ok_or_else(|| Error::Unsupported("continuous actions in a tabular environment".into()))?;
        let a = hook.override_action(t, proposed);
        let out = env.step(a, rng)?;
        agent.observe(out.reward);
        steps.push(StepRecord {
            t,
            state: s,
            action: a,
            reward: out.reward,
            target_rtg: d.target_rtg,
            observed_rtg: 0.0,
            ood_event: d.ood_event,
        });
    }
    let mut g = 0.0;
    for step in steps.iter_mut().rev() {
        g = step.reward + mdp.discount() * g;
        step.observed_rtg = g;
    }
    Ok(Trajectory { steps })
}

/// `n_episodes` independent rollouts; episode `i` draws from
/// [`episode_rng`]`(seed, i)` and gets a fresh agent.
pub fn evaluate<A: Agent>(
    mdp: &Mdp,
    make_agent: impl Fn() -> Result<A> + Sync,
    n_episodes: usize,
    max_steps: usize,
    seed: u64,
    hook: &dyn ActionHook,
) -> Result<Vec<Trajectory>> {
    (0..n_episodes as u64)
        .into_par_iter()
        .map(|ep| {
            let mut agent = make_agent()?;
            let mut rng = episode_rng(seed, ep);
            rollout(mdp, &mut agent, max_steps, &mut rng, hook)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{stairs, stairs_fig2, NoHook};
    use crate::model::{FeatureSpec, Init, JointConfig, JointModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_examples() {
        let b = BucketSpec::new(0.0, 10.0, 51).unwrap();
        let uniform = vec![1.0 / 51.0; 51];
        assert_eq!(threshold_bucket(&uniform, 0.1), 45);
        assert!((threshold(&uniform, 0.1, &b) - 9.0).abs() < 1e-12);

        let coin = [0.5, 0.5];
        assert_eq!(threshold_bucket(&coin, 0.4), 1);
        assert_eq!(threshold_bucket(&coin, 0.6), 0);

        let point = [0.0, 0.0, 0.0, 1.0, 0.0];
        for d in [0.01, 0.5, 0.99] {
            assert_eq!(threshold_bucket(&point, d), 3);
        }
    }

    #[test]
    fn tail_examples() {
        let row = [0.2, 0.3, 0.5];
        assert!((tail_from_row(&row, 1) - 0.8).abs() < 1e-15);
        assert_eq!(tail_from_row(&row, 0), 1.0);
        assert_eq!(tail_from_row(&[0.0, 1.0], 0), 1.0);
        assert_eq!(tail_from_row(&[1.0, 0.0], 1), PROB_FLOOR);
    }

    #[test]
    fn dt_scheduler_examples() {
        assert_eq!(dt_scheduler_update(5.0, 1.0, 1.0), 4.0);
        assert_eq!(dt_scheduler_update(5.0, 0.0, 1.0), 5.0);
        assert_eq!(dt_scheduler_update(3.0, 1.0, 0.5), 4.0);
    }

    fn two_action_model() -> JointModel {
        let cfg = JointConfig {
            features: FeatureSpec::OneHot { n_states: 1 },
            n_actions: 2,
            buckets: BucketSpec::new(0.0, 1.0, 2).unwrap(),
        };
        let mut m = JointModel::new(cfg, Init::Zero, 0).unwrap();
        // Joint mass only on (a0, b0) and (a1, b1).
        m.set_table_logit(0, 0, 1, -60.0);
        m.set_table_logit(0, 1, 0, -60.0);
        m
    }

    #[test]
    fn exact_marginal_is_a_mixture() {
        let m = two_action_model();
        let marg = estimate_rtg_marginal(&m, &Obs::Index(0), 0, &mut rand::rng()).unwrap();
        assert!((marg[0] - 0.5).abs() < 1e-12 && (marg[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adaptive_prefers_the_high_tail() {
        let m = two_action_model();
        let cfg = InferenceConfig { eps_eval: 0.0, delta: 0.4, ..InferenceConfig::default() };
        let d = select_action(&m, &Obs::Index(0), &cfg, 0.0, &mut rand::rng()).unwrap();
        assert_eq!(d.action, Action::Discrete(1));
        assert_eq!(d.target_rtg, 1.0);
        let cfg = InferenceConfig { delta: 0.6, ..cfg };
        // Both tails are full at the lowest bucket; the tie goes to index 0.
        let d = select_action(&m, &Obs::Index(0), &cfg, 0.0, &mut rand::rng()).unwrap();
        assert_eq!(d.action, Action::Discrete(0));
    }

    #[test]
    fn zero_mass_target_is_an_ood_event() {
        let cfg = JointConfig {
            features: FeatureSpec::OneHot { n_states: 1 },
            n_actions: 2,
            buckets: BucketSpec::new(0.0, 1.0, 3).unwrap(),
        };
        let mut m = JointModel::new(cfg, Init::Zero, 0).unwrap();
        for a in 0..2 {
            m.set_table_logit(0, a, 2, -60.0);
        }
        m.set_table_logit(0, 1, 0, 1.0);
        let icfg = InferenceConfig { strategy: Strategy::Max, eps_eval: 0.0, ..InferenceConfig::default() };
        let d = select_action(&m, &Obs::Index(0), &icfg, 1.0, &mut rand::rng()).unwrap();
        assert!(d.ood_event);
        // Falls back to the marginal argmax.
        assert_eq!(d.action, Action::Discrete(1));
        let d = select_action(&m, &Obs::Index(0), &icfg, 0.5, &mut rand::rng()).unwrap();
        assert!(!d.ood_event);
    }

    #[test]
    fn dfo_degenerate_config_is_best_of_n() {
        let cfg = DfoConfig {
            n_iters: 1,
            noise_scale: 0.0,
            n_samples: 16,
            ..DfoConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut drawn = Vec::new();
        let best = dfo_minimize(
            |xs| Ok(xs.iter().map(|x| (x[0] - 0.3).abs()).collect()),
            &cfg,
            |n, rng| {
                let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
                drawn = xs.clone();
                Ok(xs)
            },
            &mut rng,
        )
        .unwrap();
        let expect = drawn
            .iter()
            .min_by(|a, b| (a[0] - 0.3).abs().total_cmp(&(b[0] - 0.3).abs()))
            .unwrap();
        assert_eq!(&best, expect);
    }

    #[test]
    fn dfo_stays_in_bounds() {
        let cfg = DfoConfig::default().with_bounds(vec![(-1.0, 1.0), (0.0, 0.5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let best = dfo_minimize(
            |xs| Ok(xs.iter().map(|x| -(x[0] + x[1])).collect()),
            &cfg,
            |n, rng| Ok((0..n).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect()),
            &mut rng,
        )
        .unwrap();
        assert!((-1.0..=1.0).contains(&best[0]) && (0.0..=0.5).contains(&best[1]));
        assert!(best[0] > 0.9 && best[1] > 0.45);
    }

    #[test]
    fn zero_steps_is_an_empty_trajectory() {
        let env = stairs_fig2();
        let pi = TimePolicy::stationary(&vec![vec![1.0, 0.0]; env.mdp.n_states()], env.mdp.horizon());
        let mut agent = TableAgent::greedy(&pi, 2);
        let traj = rollout(&env.mdp, &mut agent, 0, &mut ChaCha8Rng::seed_from_u64(0), &NoHook).unwrap();
        assert!(traj.is_empty());
    }

    #[test]
    fn observed_rtg_is_the_discounted_suffix() {
        let env = stairs_fig2();
        let pi = TimePolicy::stationary(&vec![vec![1.0, 0.0]; env.mdp.n_states()], env.mdp.horizon());
        let run = |seed| {
            let targets = vec![vec![0.5; env.mdp.n_states()]; env.mdp.horizon()];
            let mut agent = TableAgent { targets: Some(&targets), ..TableAgent::greedy(&pi, 2) };
            rollout(&env.mdp, &mut agent, usize::MAX, &mut ChaCha8Rng::seed_from_u64(seed), &NoHook).unwrap()
        };
        let traj = run(7);
        assert_eq!(traj, run(7));
        let last = traj.steps.last().unwrap();
        assert_eq!(last.observed_rtg, last.reward);
        for w in traj.steps.windows(2) {
            assert!((w[0].observed_rtg - (w[0].reward + stairs::GAMMA * w[1].observed_rtg)).abs() < 1e-12);
        }
    }
}
