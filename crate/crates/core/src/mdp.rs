//! Finite tabular MDPs with an episode-length cap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// A finite MDP. Rewards are indexed by `(s, a, s')` so that stochastic
/// rewards can be expressed through the transition kernel; a reward that
/// only depends on `(s, a)` is simply constant across `s'`.
///
/// Entering a state flagged `terminal` ends the episode. Episodes are also
/// cut at `horizon` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    horizon: usize,
    discount: f64,
    initial_state: usize,
}

#[derive(Debug, Clone)]
pub struct MdpBuilder {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    horizon: usize,
    discount: f64,
    initial_state: usize,
}

impl MdpBuilder {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            transition: vec![0.0; n_states * n_actions * n_states],
            reward: vec![0.0; n_states * n_actions * n_states],
            terminal: vec![false; n_states],
            horizon: 1,
            discount: 1.0,
            initial_state: 0,
        }
    }

    pub fn horizon(mut self, h: usize) -> Self {
        self.horizon = h;
        self
    }

    pub fn discount(mut self, gamma: f64) -> Self {
        self.discount = gamma;
        self
    }

    pub fn initial_state(mut self, s: usize) -> Self {
        self.initial_state = s;
        self
    }

    pub fn terminal(mut self, s: usize) -> Self {
        self.terminal[s] = true;
        self
    }

    /// Adds probability mass `p` to `s -> s_next` under `a`, paying `r` on arrival.
    pub fn edge(mut self, s: usize, a: usize, s_next: usize, p: f64, r: f64) -> Self {
        let k = (s * self.n_actions + a) * self.n_states + s_next;
        self.transition[k] += p;
        self.reward[k] = r;
        self
    }

    /// Reward paid for `(s, a)` regardless of the next state.
    pub fn reward_sa(mut self, s: usize, a: usize, r: f64) -> Self {
        let base = (s * self.n_actions + a) * self.n_states;
        for k in base..base + self.n_states {
            self.reward[k] = r;
        }
        self
    }

    pub fn row(mut self, s: usize, a: usize, probs: &[f64]) -> Self {
        let base = (s * self.n_actions + a) * self.n_states;
        self.transition[base..base + self.n_states].copy_from_slice(probs);
        self
    }

    pub fn build(self) -> Result<Mdp> {
        let mdp = Mdp {
            n_states: self.n_states,
            n_actions: self.n_actions,
            transition: self.transition,
            reward: self.reward,
            terminal: self.terminal,
            horizon: self.horizon,
            discount: self.discount,
            initial_state: self.initial_state,
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

impl Mdp {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::InvalidMdp("empty state or action space".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidMdp("horizon must be positive".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::InvalidMdp(format!(
                "discount must lie in (0, 1], got {}",
                self.discount
            )));
        }
        if self.initial_state >= self.n_states {
            return Err(Error::InvalidMdp("initial state out of range".into()));
        }
        let ns = self.n_states;
        if self.transition.len() != ns * self.n_actions * ns
            || self.reward.len() != self.transition.len()
            || self.terminal.len() != ns
        {
            return Err(Error::InvalidMdp("table shapes do not match".into()));
        }
        for s in 0..ns {
            for a in 0..self.n_actions {
                let row = self.row(s, a);
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::InvalidMdp(format!(
                        "probability outside [0, 1] in row ({s}, {a})"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOL {
                    return Err(Error::InvalidMdp(format!(
                        "transition row ({s}, {a}) sums to {sum}"
                    )));
                }
            }
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidMdp("non-finite reward".into()));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    /// `P(. | s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.row(s, a)[s_next]
    }

    pub fn reward(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.reward[(s * self.n_actions + a) * self.n_states + s_next]
    }

    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        (0..self.n_states)
            .map(|sn| self.prob(s, a, sn) * self.reward(s, a, sn))
            .sum()
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        self.horizon = horizon;
        self.validate()?;
        Ok(self)
    }

    pub fn with_discount(mut self, gamma: f64) -> Result<Self> {
        self.discount = gamma;
        self.validate()?;
        Ok(self)
    }

    /// Actions that are greedy with respect to the optimal finite-horizon
    /// Q-function at the first step, lowest index on ties.
    pub fn greedy_actions(&self) -> Vec<usize> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut v_next = vec![0.0; ns];
        let mut q = vec![0.0; ns * na];
        for _ in 0..self.horizon {
            for s in 0..ns {
                for a in 0..na {
                    q[s * na + a] = (0..ns)
                        .map(|sn| {
                            let cont = if self.terminal[sn] { 0.0 } else { v_next[sn] };
                            self.prob(s, a, sn) * (self.reward(s, a, sn) + self.discount * cont)
                        })
                        .sum();
                }
            }
            for (s, v) in v_next.iter_mut().enumerate() {
                *v = q[s * na..(s + 1) * na]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        (0..ns)
            .map(|s| crate::util::argmax(&q[s * na..(s + 1) * na]))
            .collect()
    }
}
