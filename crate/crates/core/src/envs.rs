//! Small tabular environments, behavior policies and offline data generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bucket::BucketSpec;
use crate::dataset::{Action, Dataset, Obs, Transition};
use crate::error::{Error, Result};
use crate::mdp::{Mdp, MdpBuilder};
use crate::util::sample_index;

/// Per-episode RNG: the root seed XOR the episode id.
pub fn episode_rng(seed: u64, episode_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ episode_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BehaviorPolicy {
    Uniform,
    /// With probability `1 - eps` the greedy action, otherwise uniform.
    EpsGreedy { eps: f64 },
    Table(Vec<Vec<f64>>),
}

impl BehaviorPolicy {
    /// Resolves the policy into per-state action rows for `mdp`.
    pub fn table(&self, mdp: &Mdp) -> Result<Vec<Vec<f64>>> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let rows = match self {
            BehaviorPolicy::Uniform => vec![vec![1.0 / na as f64; na]; ns],
            BehaviorPolicy::EpsGreedy { eps } => {
                if !(0.0..=1.0).contains(eps) {
                    return Err(Error::InvalidConfig(format!("eps must lie in [0, 1], got {eps}")));
                }
                mdp.greedy_actions()
                    .into_iter()
                    .map(|best| {
                        (0..na)
                            .map(|a| eps / na as f64 + if a == best { 1.0 - eps } else { 0.0 })
                            .collect()
                    })
                    .collect()
            }
            BehaviorPolicy::Table(rows) => rows.clone(),
        };
        validate_rows(&rows, ns, na)?;
        Ok(rows)
    }

    /// Parses `uniform`, `eps-greedy:<eps>`; `default` is resolved by the catalog.
    pub fn parse(name: &str) -> Result<Self> {
        if name == "uniform" {
            return Ok(BehaviorPolicy::Uniform);
        }
        if let Some(eps) = name.strip_prefix("eps-greedy:") {
            let eps = eps.parse::<f64>().map_err(|_| Error::UnknownName {
                kind: "policy",
                name: name.to_string(),
            })?;
            return Ok(BehaviorPolicy::EpsGreedy { eps });
        }
        Err(Error::UnknownName {
            kind: "policy",
            name: name.to_string(),
        })
    }
}

pub fn validate_rows(rows: &[Vec<f64>], n_states: usize, n_actions: usize) -> Result<()> {
    if rows.len() != n_states || rows.iter().any(|r| r.len() != n_actions) {
        return Err(Error::InvalidConfig("policy table has the wrong shape".into()));
    }
    for (s, row) in rows.iter().enumerate() {
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig(format!("policy row {s} has entries outside [0, 1]")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("policy row {s} sums to {sum}")));
        }
    }
    Ok(())
}

/// An environment from the catalog with its default data policy and RTG grid.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub name: String,
    pub mdp: Mdp,
    pub buckets: BucketSpec,
    pub behavior: BehaviorPolicy,
}

impl EnvSpec {
    /// Resolves `default` to this environment's data policy.
    pub fn policy(&self, name: &str) -> Result<BehaviorPolicy> {
        if name == "default" {
            Ok(self.behavior.clone())
        } else {
            BehaviorPolicy::parse(name)
        }
    }
}

pub mod bandit {
    pub const UP: usize = 0;
    pub const DOWN: usize = 1;
    pub const START: usize = 0;
    pub const WIN: usize = 1;
    pub const LOSE: usize = 2;
}

/// Single decision, two actions. Either action pays 1 or 0 with equal
/// probability, so under a uniform behavior policy `p(up | R = 1) = 0.5`.
pub fn bandit_fig1() -> EnvSpec {
    use bandit::*;
    let mdp = MdpBuilder::new(3, 2)
        .edge(START, UP, WIN, 0.5, 1.0)
        .edge(START, UP, LOSE, 0.5, 0.0)
        .edge(START, DOWN, WIN, 0.5, 1.0)
        .edge(START, DOWN, LOSE, 0.5, 0.0)
        .edge(WIN, UP, WIN, 1.0, 0.0)
        .edge(WIN, DOWN, WIN, 1.0, 0.0)
        .edge(LOSE, UP, LOSE, 1.0, 0.0)
        .edge(LOSE, DOWN, LOSE, 1.0, 0.0)
        .terminal(WIN)
        .terminal(LOSE)
        .horizon(1)
        .discount(0.99)
        .build()
        .expect("bandit tables are valid");
    EnvSpec {
        name: "bandit".into(),
        mdp,
        buckets: BucketSpec::new(0.0, 1.0, 11).expect("valid grid"),
        behavior: BehaviorPolicy::Uniform,
    }
}

pub mod stairs {
    pub const UP: usize = 0;
    pub const SLIP: usize = 1;
    pub const TOP: usize = 4;
    pub const DEAD_END: usize = 5;
    pub const GAMMA: f64 = 0.9;
}

/// Five stair cells (cell 4 is the goal) and one absorbing dead end.
///
/// `UP` climbs one cell and pays 1 on reaching the top, which ends the
/// episode. `SLIP` drops one cell, or into the dead end from the bottom.
/// Horizon 6 leaves room for exactly one slip above the bottom cell; with
/// discounting a slip lowers the best attainable RTG, so a target carried
/// over from before the slip becomes unattainable.
///
/// The default data policy climbs with probability 0.8, except on cell 2
/// where it slips more often than it climbs.
pub fn stairs_fig2() -> EnvSpec {
    use stairs::*;
    let mut b = MdpBuilder::new(6, 2);
    for h in 0..TOP {
        let r = if h + 1 == TOP { 1.0 } else { 0.0 };
        b = b.edge(h, UP, h + 1, 1.0, r);
        let down = if h == 0 { DEAD_END } else { h - 1 };
        b = b.edge(h, SLIP, down, 1.0, 0.0);
    }
    for s in [TOP, DEAD_END] {
        b = b.edge(s, UP, s, 1.0, 0.0).edge(s, SLIP, s, 1.0, 0.0);
    }
    let mdp = b
        .terminal(TOP)
        .horizon(6)
        .discount(GAMMA)
        .build()
        .expect("stairs tables are valid");
    let mut rows = vec![vec![0.8, 0.2]; 6];
    rows[2] = vec![0.45, 0.55];
    rows[TOP] = vec![0.5, 0.5];
    rows[DEAD_END] = vec![0.5, 0.5];
    EnvSpec {
        name: "stairs".into(),
        mdp,
        buckets: BucketSpec::new(0.0, 1.0, 21).expect("valid grid"),
        behavior: BehaviorPolicy::Table(rows),
    }
}

pub mod chain {
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;
}

/// `n` chain cells plus an absorbing sink (index `n`). `RIGHT` advances and
/// pays 1 when taken in the last cell; `LEFT` falls into the sink. Episodes
/// always run the full horizon `n`, and cell `i` is only reachable at step `i`.
pub fn chain(n: usize) -> Result<EnvSpec> {
    use chain::*;
    if n == 0 {
        return Err(Error::InvalidConfig("chain needs at least one cell".into()));
    }
    let sink = n;
    let mut b = MdpBuilder::new(n + 1, 2);
    for i in 0..n {
        let (next, r) = if i + 1 == n { (sink, 1.0) } else { (i + 1, 0.0) };
        b = b.edge(i, RIGHT, next, 1.0, r).edge(i, LEFT, sink, 1.0, 0.0);
    }
    b = b.edge(sink, LEFT, sink, 1.0, 0.0).edge(sink, RIGHT, sink, 1.0, 0.0);
    let mdp = b.horizon(n).discount(0.99).build()?;
    Ok(EnvSpec {
        name: format!("chain{n}"),
        mdp,
        buckets: BucketSpec::new(0.0, 1.0, 11)?,
        behavior: BehaviorPolicy::Uniform,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomMdpShape {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
}

impl RandomMdpShape {
    /// The shape used by the theorem suites: up to 6 states, 3 actions, horizon 5.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            n_states: rng.random_range(2..=6),
            n_actions: rng.random_range(2..=3),
            horizon: rng.random_range(2..=5),
        }
    }
}

/// Random MDP: rewards uniform on {0, 0.5, 1} per (s, a), transition rows
/// from a flat Dirichlet, discount 0.9.
pub fn random_mdp(seed: u64, shape: RandomMdpShape) -> Result<Mdp> {
    if shape.n_states == 0 || shape.n_actions == 0 || shape.horizon == 0 {
        return Err(Error::InvalidConfig("random MDP dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = MdpBuilder::new(shape.n_states, shape.n_actions)
        .horizon(shape.horizon)
        .discount(0.9);
    for s in 0..shape.n_states {
        for a in 0..shape.n_actions {
            let row = dirichlet_row(&mut rng, shape.n_states);
            let r = [0.0, 0.5, 1.0][rng.random_range(0..3)];
            b = b.row(s, a, &row).reward_sa(s, a, r);
        }
    }
    b.build()
}

/// A flat-Dirichlet probability vector whose entries sum to 1 within 1e-12.
pub fn dirichlet_row<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    // Normalized unit-rate exponentials are Dirichlet(1, ..., 1).
    let mut row: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= s);
    let head: f64 = row[..n - 1].iter().sum();
    row[n - 1] = (1.0 - head).max(0.0);
    row
}

/// A random full-support behavior policy for an MDP.
pub fn random_behavior(seed: u64, mdp: &Mdp) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..mdp.n_states())
        .map(|_| dirichlet_row(&mut rng, mdp.n_actions()))
        .collect()
}

/// Looks up a catalog environment: `bandit`, `stairs`, `chain<n>` / `chain:<n>`.
pub fn make_env(name: &str) -> Result<EnvSpec> {
    match name {
        "bandit" | "bandit_fig1" => Ok(bandit_fig1()),
        "stairs" | "stairs_fig2" => Ok(stairs_fig2()),
        _ => {
            let n = name
                .strip_prefix("chain:")
                .or_else(|| name.strip_prefix("chain"))
                .and_then(|n| n.parse::<usize>().ok());
            match n {
                Some(n) => chain(n),
                None => Err(Error::UnknownName {
                    kind: "environment",
                    name: name.to_string(),
                }),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: usize,
    pub next_state: usize,
    pub reward: f64,
    pub done: bool,
}

/// Episode state machine over a tabular MDP.
#[derive(Debug, Clone)]
pub struct EnvState<'a> {
    mdp: &'a Mdp,
    state: usize,
    t: usize,
    done: bool,
    max_steps: usize,
}

impl<'a> EnvState<'a> {
    pub fn new(mdp: &'a Mdp) -> Self {
        Self::with_max_steps(mdp, mdp.horizon())
    }

    /// Episodes are cut at `min(max_steps, horizon)`.
    pub fn with_max_steps(mdp: &'a Mdp, max_steps: usize) -> Self {
        Self {
            mdp,
            state: mdp.initial_state(),
            t: 0,
            done: max_steps == 0,
            max_steps: max_steps.min(mdp.horizon()),
        }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn mdp(&self) -> &Mdp {
        self.mdp
    }

    pub fn step<R: Rng + ?Sized>(&mut self, action: usize, rng: &mut R) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::InvalidConfig("step called on a finished episode".into()));
        }
        if action >= self.mdp.n_actions() {
            return Err(Error::OutOfRange {
                index: action,
                len: self.mdp.n_actions(),
            });
        }
        let s = self.state;
        let next = sample_index(self.mdp.row(s, action), rng);
        let reward = self.mdp.reward(s, action, next);
        self.t += 1;
        self.state = next;
        self.done = self.mdp.is_terminal(next) || self.t >= self.max_steps;
        Ok(StepOutcome {
            state: s,
            next_state: next,
            reward,
            done: self.done,
        })
    }
}

/// Overrides the executed action during evaluation rollouts.
pub trait ActionHook: Sync {
    fn override_action(&self, t: usize, proposed: usize) -> usize;
}

pub struct NoHook;

impl ActionHook for NoHook {
    fn override_action(&self, _t: usize, proposed: usize) -> usize {
        proposed
    }
}

/// At step `t` execute `action` whatever the policy proposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForceAction {
    pub t: usize,
    pub action: usize,
}

impl ActionHook for ForceAction {
    fn override_action(&self, t: usize, proposed: usize) -> usize {
        if t == self.t {
            self.action
        } else {
            proposed
        }
    }
}

pub fn force_action(t_forced: usize, a_forced: usize) -> ForceAction {
    ForceAction {
        t: t_forced,
        action: a_forced,
    }
}

/// Rolls out `n_episodes` episodes of `behavior` and labels them with RTG.
/// Episode `i` uses the RNG stream `seed ^ i`, so output depends only on
/// the arguments.
pub fn generate_dataset(
    mdp: &Mdp,
    behavior: &BehaviorPolicy,
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    let table = behavior.table(mdp)?;
    let episodes: Vec<Vec<Transition>> = (0..n_episodes as u64)
        .into_par_iter()
        .map(|ep| {
            let mut rng = episode_rng(seed, ep);
            let mut env = EnvState::new(mdp);
            let mut out = Vec::with_capacity(mdp.horizon());
            while !env.is_done() {
                let t = env.t();
                let a = sample_index(&table[env.state()], &mut rng);
                let step = env.step(a, &mut rng).expect("action in range");
                out.push(Transition {
                    episode_id: ep,
                    t,
                    state: Obs::Index(step.state),
                    action: Action::Discrete(a),
                    reward: step.reward,
                    done: step.done,
                });
            }
            out
        })
        .collect();
    Dataset::new(episodes.into_iter().flatten().collect(), mdp.discount())
}

/// The three-noisy-sample dataset: six uniform-policy bandit episodes of
/// which exactly three pay 1, all three after `DOWN`. Returns the first
/// seed (scanning from 0) that produces that shape, with its dataset.
pub fn figure1_dataset() -> (u64, Dataset) {
    let env = bandit_fig1();
    for seed in 0.. {
        let ds = generate_dataset(&env.mdp, &BehaviorPolicy::Uniform, 6, seed)
            .expect("bandit generation cannot fail");
        let wins: Vec<&Transition> = ds.transitions().iter().filter(|t| t.reward > 0.5).collect();
        let has_up = ds
            .transitions()
            .iter()
            .any(|t| t.action == Action::Discrete(bandit::UP));
        if wins.len() == 3
            && has_up
            && wins.iter().all(|t| t.action == Action::Discrete(bandit::DOWN))
        {
            return (seed, ds);
        }
    }
    unreachable!("seed space exhausted")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_envs_are_valid() {
        for name in ["bandit", "stairs", "chain3", "chain:5"] {
            let env = make_env(name).unwrap();
            env.mdp.validate().unwrap();
            env.behavior.table(&env.mdp).unwrap();
        }
        assert!(make_env("pong").is_err());
    }

    #[test]
    fn random_mdps_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..50 {
            let shape = RandomMdpShape::draw(&mut rng);
            let mdp = random_mdp(seed, shape).unwrap();
            assert!(mdp.n_states() <= 6 && mdp.n_actions() <= 3 && mdp.horizon() <= 5);
            validate_rows(&random_behavior(seed, &mdp), mdp.n_states(), mdp.n_actions()).unwrap();
        }
    }

    #[test]
    fn chain_episode_structure() {
        let env = chain(3).unwrap();
        let ds = generate_dataset(&env.mdp, &BehaviorPolicy::Uniform, 1, 11).unwrap();
        assert_eq!(ds.len(), 3);
        let dones: Vec<bool> = ds.transitions().iter().map(|t| t.done).collect();
        assert_eq!(dones, vec![false, false, true]);
    }

    #[test]
    fn zero_episodes_is_empty() {
        let env = stairs_fig2();
        let ds = generate_dataset(&env.mdp, &env.behavior, 0, 1).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn generation_is_reproducible() {
        let env = stairs_fig2();
        let a = generate_dataset(&env.mdp, &env.behavior, 200, 42).unwrap();
        let b = generate_dataset(&env.mdp, &env.behavior, 200, 42).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_jsonl(&mut x).unwrap();
        b.write_jsonl(&mut y).unwrap();
        assert_eq!(x, y);
        let c = generate_dataset(&env.mdp, &env.behavior, 200, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn figure1_dataset_shape() {
        let (_, ds) = figure1_dataset();
        assert_eq!(ds.n_episodes(), 6);
        let wins: Vec<_> = ds.transitions().iter().filter(|t| t.reward > 0.5).collect();
        assert_eq!(wins.len(), 3);
        assert!(wins.iter().all(|t| t.action == Action::Discrete(bandit::DOWN)));
    }

    #[test]
    fn eps_greedy_on_stairs_prefers_climbing() {
        let env = stairs_fig2();
        let rows = BehaviorPolicy::EpsGreedy { eps: 0.2 }.table(&env.mdp).unwrap();
        assert!((rows[0][stairs::UP] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn forced_bad_move_enters_slip_branch() {
        let env = stairs_fig2();
        let hook = force_action(2, stairs::SLIP);
        let mut st = EnvState::new(&env.mdp);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut visited = vec![st.state()];
        while !st.is_done() {
            let a = hook.override_action(st.t(), stairs::UP);
            visited.push(st.step(a, &mut rng).unwrap().next_state);
        }
        // 0 -> 1 -> 2 -(slip)-> 1 -> 2 -> 3 -> top, at the horizon.
        assert_eq!(visited, vec![0, 1, 2, 1, 2, 3, 4]);
    }

    #[test]
    fn late_force_and_self_force_are_no_ops() {
        let late = force_action(10, stairs::SLIP);
        let same = force_action(1, stairs::UP);
        for t in 0..6 {
            assert_eq!(late.override_action(t, stairs::UP), stairs::UP);
            assert_eq!(same.override_action(t, stairs::UP), stairs::UP);
        }
    }
}
