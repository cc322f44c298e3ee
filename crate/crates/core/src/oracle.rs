//! Exact finite-horizon ground truth for small tabular MDPs.
//!
//! Everything here is indexed by the step `t` (remaining horizon `H - t`):
//! the law of the return from `(s, a)` depends on how many steps are left,
//! so policies and thresholds are time-indexed as well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bucket::BucketSpec;
use crate::error::{Error, Result};
use crate::mdp::Mdp;
use crate::util::sample_index;

/// Returns closer than this are merged into one support point.
pub const MERGE_TOL: f64 = 1e-9;

pub const MAX_HORIZON: usize = 6;
pub const MAX_STATES: usize = 8;
pub const MAX_ACTIONS: usize = 4;

/// A finite discrete law, support sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnLaw {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl ReturnLaw {
    pub fn point(x: f64) -> Self {
        Self {
            support: vec![x],
            probs: vec![1.0],
        }
    }

    /// Builds a law from weighted atoms, merging values within [`MERGE_TOL`].
    /// Atoms are accumulated in sorted order so the result is canonical.
    pub fn from_atoms(mut atoms: Vec<(f64, f64)>) -> Self {
        atoms.retain(|&(_, p)| p > 0.0);
        atoms.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut support: Vec<f64> = Vec::new();
        let mut probs: Vec<f64> = Vec::new();
        for (v, p) in atoms {
            match support.last() {
                Some(&last) if (v - last).abs() <= MERGE_TOL => *probs.last_mut().unwrap() += p,
                _ => {
                    support.push(v);
                    probs.push(p);
                }
            }
        }
        Self { support, probs }
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    /// `P(X = x)` up to the merge tolerance.
    pub fn mass_at(&self, x: f64) -> f64 {
        self.support
            .iter()
            .zip(&self.probs)
            .filter(|(v, _)| (**v - x).abs() <= MERGE_TOL)
            .map(|(_, p)| p)
            .sum()
    }

    /// `P(X >= c)` up to the merge tolerance.
    pub fn tail(&self, c: f64) -> f64 {
        self.support
            .iter()
            .zip(&self.probs)
            .filter(|(v, _)| **v >= c - MERGE_TOL)
            .map(|(_, p)| p)
            .sum()
    }

    /// Largest support point whose upper tail holds at least `delta`.
    pub fn threshold(&self, delta: f64) -> f64 {
        let mut tail = 0.0;
        for (v, p) in self.support.iter().zip(&self.probs).rev() {
            tail += p;
            if tail >= delta {
                return *v;
            }
        }
        self.support[0]
    }
}

/// A possibly non-stationary policy `pi[t][s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePolicy {
    rows: Vec<Vec<Vec<f64>>>,
}

impl TimePolicy {
    pub fn new(rows: Vec<Vec<Vec<f64>>>) -> Self {
        Self { rows }
    }

    pub fn stationary(table: &[Vec<f64>], horizon: usize) -> Self {
        Self {
            rows: vec![table.to_vec(); horizon],
        }
    }

    pub fn at(&self, t: usize, s: usize) -> &[f64] {
        &self.rows[t][s]
    }

    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<Vec<f64>>] {
        &self.rows
    }
}

/// Laws of the return under a behavior policy, per step, state and first action.
#[derive(Debug, Clone)]
pub struct ExactRtgDistribution {
    /// `by_action[t][s][a]`: law of `Z_t(s, a)`.
    by_action: Vec<Vec<Vec<ReturnLaw>>>,
    /// `marginal[t][s]`: the mixture over `a ~ beta(.|s)`.
    marginal: Vec<Vec<ReturnLaw>>,
}

impl ExactRtgDistribution {
    pub fn law(&self, t: usize, s: usize, a: usize) -> &ReturnLaw {
        &self.by_action[t][s][a]
    }

    pub fn marginal(&self, t: usize, s: usize) -> &ReturnLaw {
        &self.marginal[t][s]
    }

    pub fn horizon(&self) -> usize {
        self.marginal.len()
    }
}

pub fn check_bounds(mdp: &Mdp) -> Result<()> {
    if mdp.horizon() > MAX_HORIZON || mdp.n_states() > MAX_STATES || mdp.n_actions() > MAX_ACTIONS {
        return Err(Error::EnumerationBound(format!(
            "need horizon <= {MAX_HORIZON}, states <= {MAX_STATES}, actions <= {MAX_ACTIONS}; got {}, {}, {}",
            mdp.horizon(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

fn check_policy(mdp: &Mdp, pi: &TimePolicy) -> Result<()> {
    if pi.horizon() < mdp.horizon()
        || pi
            .rows
            .iter()
            .any(|t| t.len() != mdp.n_states() || t.iter().any(|r| r.len() != mdp.n_actions()))
    {
        return Err(Error::InvalidConfig("policy shape does not match the MDP".into()));
    }
    Ok(())
}

/// Backward recursion: `Z_t(s, a) = r(s, a, s') + gamma * Z_{t+1}(s')`, with
/// the continuation zero after a terminal state or the last step.
pub fn exact_rtg_distribution_tv(mdp: &Mdp, beta: &TimePolicy) -> Result<ExactRtgDistribution> {
    check_bounds(mdp)?;
    check_policy(mdp, beta)?;
    let (h, ns, na) = (mdp.horizon(), mdp.n_states(), mdp.n_actions());
    let gamma = mdp.discount();
    let mut by_action = vec![Vec::new(); h];
    let mut marginal: Vec<Vec<ReturnLaw>> = vec![Vec::new(); h];
    for t in (0..h).rev() {
        let mut step = Vec::with_capacity(ns);
        for s in 0..ns {
            let laws: Vec<ReturnLaw> = (0..na)
                .map(|a| {
                    let mut atoms = Vec::new();
                    for sn in 0..ns {
                        let p = mdp.prob(s, a, sn);
                        if p == 0.0 {
                            continue;
                        }
                        let r = mdp.reward(s, a, sn);
                        if t + 1 == h || mdp.is_terminal(sn) {
                            atoms.push((r, p));
                        } else {
                            let next = &marginal[t + 1][sn];
                            atoms.extend(next.support.iter().zip(&next.probs).map(|(v, q)| (r + gamma * v, p * q)));
                        }
                    }
                    ReturnLaw::from_atoms(atoms)
                })
                .collect();
            step.push(laws);
        }
        marginal[t] = (0..ns)
            .map(|s| {
                let atoms = (0..na)
                    .filter(|&a| beta.at(t, s)[a] > 0.0)
                    .flat_map(|a| {
                        let w = beta.at(t, s)[a];
                        let law = &step[s][a];
                        law.support.iter().zip(&law.probs).map(move |(v, p)| (*v, w * p))
                    })
                    .collect();
                ReturnLaw::from_atoms(atoms)
            })
            .collect();
        by_action[t] = step;
    }
    Ok(ExactRtgDistribution { by_action, marginal })
}

pub fn exact_rtg_distribution(mdp: &Mdp, beta: &[Vec<f64>]) -> Result<ExactRtgDistribution> {
    exact_rtg_distribution_tv(mdp, &TimePolicy::stationary(beta, mdp.horizon()))
}

/// `beta(a | s, Z_t = r)` by Bayes' rule over the exact return laws.
pub fn exact_posterior(dist: &ExactRtgDistribution, beta: &[Vec<f64>], t: usize, s: usize, r: f64) -> Result<Vec<f64>> {
    let weights: Vec<f64> = beta[s]
        .iter()
        .enumerate()
        .map(|(a, b)| b * dist.law(t, s, a).mass_at(r))
        .collect();
    let z: f64 = weights.iter().sum();
    if z <= 0.0 {
        return Err(Error::OodReturn { state: s, value: r });
    }
    Ok(weights.into_iter().map(|w| w / z).collect())
}

/// `pi_delta_t(a | s) = beta(a | s, Z_t >= theta_delta(t, s))`.
pub fn exact_pi_delta_from(dist: &ExactRtgDistribution, beta: &[Vec<f64>], delta: f64) -> TimePolicy {
    let rows = (0..dist.horizon())
        .map(|t| {
            (0..beta.len())
                .map(|s| {
                    let theta = dist.marginal(t, s).threshold(delta);
                    let w: Vec<f64> = beta[s]
                        .iter()
                        .enumerate()
                        .map(|(a, b)| b * dist.law(t, s, a).tail(theta))
                        .collect();
                    let z: f64 = w.iter().sum();
                    w.into_iter().map(|x| x / z).collect()
                })
                .collect()
        })
        .collect();
    TimePolicy::new(rows)
}

/// `beta(a | s) P(Z_t in bucket b | s, a)` for every `(s, a, b)`.
pub fn bucketed_joint(dist: &ExactRtgDistribution, beta: &[Vec<f64>], t: usize, buckets: &BucketSpec) -> Vec<Vec<Vec<f64>>> {
    (0..beta.len())
        .map(|s| {
            beta[s]
                .iter()
                .enumerate()
                .map(|(a, b)| {
                    let law = dist.law(t, s, a);
                    let mut row = vec![0.0; buckets.len()];
                    for (r, p) in law.support().iter().zip(law.probs()) {
                        row[buckets.discretize(*r)] += b * p;
                    }
                    row
                })
                .collect()
        })
        .collect()
}

pub fn exact_pi_delta(mdp: &Mdp, beta: &[Vec<f64>], delta: f64) -> Result<TimePolicy> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig(format!("delta must lie in (0, 1), got {delta}")));
    }
    let dist = exact_rtg_distribution(mdp, beta)?;
    Ok(exact_pi_delta_from(&dist, beta, delta))
}

/// `V_t(s)` for every step and state.
pub fn policy_values_by_step(mdp: &Mdp, pi: &TimePolicy) -> Result<Vec<Vec<f64>>> {
    check_policy(mdp, pi)?;
    let (h, ns, na) = (mdp.horizon(), mdp.n_states(), mdp.n_actions());
    let mut v = vec![vec![0.0; ns]; h + 1];
    for t in (0..h).rev() {
        for s in 0..ns {
            v[t][s] = (0..na)
                .map(|a| {
                    let q: f64 = (0..ns)
                        .map(|sn| {
                            let cont = if mdp.is_terminal(sn) { 0.0 } else { v[t + 1][sn] };
                            mdp.prob(s, a, sn) * (mdp.reward(s, a, sn) + mdp.discount() * cont)
                        })
                        .sum();
                    pi.at(t, s)[a] * q
                })
                .sum();
        }
    }
    v.truncate(h);
    Ok(v)
}

/// `V_0(s)` for every state.
pub fn policy_value(mdp: &Mdp, pi: &TimePolicy) -> Result<Vec<f64>> {
    Ok(policy_values_by_step(mdp, pi)?.swap_remove(0))
}

/// `KL(pi(T) || beta(T))` over trajectories from the initial state,
/// by explicit enumeration. Transition factors cancel in the ratio.
pub fn trajectory_kl(mdp: &Mdp, pi: &TimePolicy, beta: &TimePolicy) -> Result<f64> {
    check_bounds(mdp)?;
    check_policy(mdp, pi)?;
    check_policy(mdp, beta)?;

    fn walk(mdp: &Mdp, pi: &TimePolicy, beta: &TimePolicy, t: usize, s: usize, prob: f64, log_ratio: f64) -> Result<f64> {
        let mut total = 0.0;
        for a in 0..mdp.n_actions() {
            let p = pi.at(t, s)[a];
            if p == 0.0 {
                continue;
            }
            let b = beta.at(t, s)[a];
            if b == 0.0 {
                return Err(Error::InfiniteKl);
            }
            let lr = log_ratio + (p / b).ln();
            for sn in 0..mdp.n_states() {
                let q = mdp.prob(s, a, sn);
                if q == 0.0 {
                    continue;
                }
                let pr = prob * p * q;
                if t + 1 == mdp.horizon() || mdp.is_terminal(sn) {
                    total += pr * lr;
                } else {
                    total += walk(mdp, pi, beta, t + 1, sn, pr, lr)?;
                }
            }
        }
        Ok(total)
    }

    walk(mdp, pi, beta, 0, mdp.initial_state(), 1.0, 0.0)
}

/// The same KL by backward recursion over per-step action KLs.
pub fn trajectory_kl_recursive(mdp: &Mdp, pi: &TimePolicy, beta: &TimePolicy) -> Result<f64> {
    check_policy(mdp, pi)?;
    check_policy(mdp, beta)?;
    let (h, ns, na) = (mdp.horizon(), mdp.n_states(), mdp.n_actions());
    let mut next = vec![0.0; ns];
    for t in (0..h).rev() {
        let mut cur = vec![0.0; ns];
        for (s, c) in cur.iter_mut().enumerate() {
            for a in 0..na {
                let p = pi.at(t, s)[a];
                if p == 0.0 {
                    continue;
                }
                let b = beta.at(t, s)[a];
                if b == 0.0 {
                    return Err(Error::InfiniteKl);
                }
                let cont: f64 = (0..ns)
                    .filter(|&sn| !mdp.is_terminal(sn))
                    .map(|sn| mdp.prob(s, a, sn) * next[sn])
                    .sum();
                *c += p * ((p / b).ln() + cont);
            }
        }
        next = cur;
    }
    Ok(next[mdp.initial_state()])
}

/// `E[X | X >= c] >= E[X] - 1e-12` for a finite law given as atoms.
pub fn conditional_mean_dominance_check(values: &[f64], probs: &[f64], c: f64) -> Result<bool> {
    let tail: f64 = values.iter().zip(probs).filter(|(v, _)| **v >= c).map(|(_, p)| p).sum();
    if tail <= 0.0 {
        return Err(Error::ZeroTailMass(c));
    }
    let total: f64 = probs.iter().sum();
    let mean = values.iter().zip(probs).map(|(v, p)| v * p).sum::<f64>() / total;
    let cond = values
        .iter()
        .zip(probs)
        .filter(|(v, _)| **v >= c)
        .map(|(v, p)| v * p)
        .sum::<f64>()
        / tail;
    Ok(cond >= mean - 1e-12)
}

/// Mean and standard error of the discounted return `sum gamma^t r_t`
/// over `n` Monte Carlo episodes of `pi` from the initial state.
pub fn monte_carlo_value(mdp: &Mdp, pi: &TimePolicy, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let returns: Vec<f64> = (0..n)
        .map(|_| {
            let mut s = mdp.initial_state();
            let mut g = 0.0;
            let mut disc = 1.0;
            for t in 0..mdp.horizon() {
                let a = sample_index(pi.at(t, s), &mut rng);
                let sn = sample_index(mdp.row(s, a), &mut rng);
                g += disc * mdp.reward(s, a, sn);
                disc *= mdp.discount();
                s = sn;
                if mdp.is_terminal(sn) {
                    break;
                }
            }
            g
        })
        .collect();
    let (mean, std) = crate::util::mean_std(&returns);
    (mean, std / (n as f64).sqrt())
}

/// One row of the theorem suite.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremCell {
    pub instance_seed: u64,
    pub delta: f64,
    pub horizon: usize,
    pub kl: f64,
    pub kl_bound: f64,
    /// `min_{t,s} V^{pi_delta}_t(s) - V^beta_t(s)`.
    pub min_value_gap: f64,
    pub worst_state: usize,
    pub worst_step: usize,
}

impl TheoremCell {
    pub fn kl_holds(&self) -> bool {
        self.kl <= self.kl_bound + 1e-12
    }

    pub fn value_holds(&self) -> bool {
        self.min_value_gap >= -1e-9
    }
}

pub const SUITE_DELTAS: [f64; 4] = [0.1, 0.3, 0.5, 0.9];

/// Evaluates both halves of the theorem on one random MDP instance.
pub fn theorem_instance(instance_seed: u64, deltas: &[f64]) -> Result<Vec<TheoremCell>> {
    use crate::envs::{random_behavior, random_mdp, RandomMdpShape};
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
    let shape = RandomMdpShape::draw(&mut rng);
    let mdp = random_mdp(rng.random(), shape)?;
    let beta = random_behavior(rng.random(), &mdp);
    let beta_tp = TimePolicy::stationary(&beta, mdp.horizon());
    let dist = exact_rtg_distribution(&mdp, &beta)?;
    let v_beta = policy_values_by_step(&mdp, &beta_tp)?;
    deltas
        .iter()
        .map(|&delta| {
            let pi = exact_pi_delta_from(&dist, &beta, delta);
            let kl = trajectory_kl(&mdp, &pi, &beta_tp)?;
            let v_pi = policy_values_by_step(&mdp, &pi)?;
            let (mut gap, mut worst_state, mut worst_step) = (f64::INFINITY, 0, 0);
            for t in 0..mdp.horizon() {
                for s in 0..mdp.n_states() {
                    let g = v_pi[t][s] - v_beta[t][s];
                    if g < gap {
                        (gap, worst_state, worst_step) = (g, s, t);
                    }
                }
            }
            Ok(TheoremCell {
                instance_seed,
                delta,
                horizon: mdp.horizon(),
                kl,
                kl_bound: -(mdp.horizon() as f64) * delta.ln(),
                min_value_gap: gap,
                worst_state,
                worst_step,
            })
        })
        .collect()
}

/// Instances `seed, seed + 1, ...`; instance `i` uses seed `seed + i`.
pub fn theorem2_suite(n_instances: usize, seed: u64, deltas: &[f64]) -> Result<Vec<TheoremCell>> {
    use rayon::prelude::*;
    let cells: Vec<Vec<TheoremCell>> = (0..n_instances as u64)
        .into_par_iter()
        .map(|i| theorem_instance(seed.wrapping_add(i), deltas))
        .collect::<Result<_>>()?;
    Ok(cells.into_iter().flatten().collect())
}
