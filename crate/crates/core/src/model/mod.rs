//! Learnable models over actions and RTG buckets.
//!
//! All models keep their parameters in one flat vector and describe their
//! forward pass on an autodiff [`Tape`], so probability queries and losses
//! share the same code path.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::bucket::BucketSpec;
use crate::dataset::{Action, Obs};
use crate::error::{Error, Result};

pub mod checkpoint;
pub mod factored;
pub mod joint;

pub use checkpoint::{Checkpoint, ModelKind};
pub use factored::{FactoredConfig, FactoredModel, PriorSpec};
pub use joint::{JointConfig, JointModel};

/// Lower bound applied inside every log of a probability.
pub use crate::util::PROB_FLOOR;

/// `-ln max(p_a, floor) - ln max(p_r, floor)`.
pub fn energy(p_action: f64, p_rtg: f64) -> f64 {
    -crate::util::floored_ln(p_action) - crate::util::floored_ln(p_rtg)
}

/// Contiguous block of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn on(&self, tape: &Tape, theta: Var) -> Var {
        tape.slice(theta, self.offset, self.rows, self.cols)
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Default)]
pub(crate) struct Layout {
    size: usize,
}

impl Layout {
    pub(crate) fn block(&mut self, rows: usize, cols: usize) -> Block {
        let b = Block {
            offset: self.size,
            rows,
            cols,
        };
        self.size += rows * cols;
        b
    }

    pub(crate) fn size(&self) -> usize {
        self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Xavier-uniform hidden layers, small uniform output weights, zero biases.
    Default,
    /// Every parameter zero; output distributions are exactly uniform.
    Zero,
}

pub(crate) const OUTPUT_INIT_SCALE: f64 = 0.01;

pub(crate) fn init_uniform(params: &mut [f64], block: Block, scale: f64, rng: &mut ChaCha8Rng) {
    for p in &mut params[block.range()] {
        *p = rng.random_range(-scale..=scale);
    }
}

pub(crate) fn xavier(params: &mut [f64], block: Block, rng: &mut ChaCha8Rng) {
    let scale = (6.0 / (block.rows + block.cols) as f64).sqrt();
    init_uniform(params, block, scale, rng);
}

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// How states are turned into feature rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    /// Tabular states, one-hot encoded.
    OneHot { n_states: usize },
    /// Feature vectors through one tanh hidden layer. Tabular indices are
    /// accepted and one-hot encoded to `input_dim`.
    Mlp { input_dim: usize, width: usize },
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        match self {
            FeatureSpec::OneHot { n_states } => *n_states,
            FeatureSpec::Mlp { width, .. } => *width,
        }
    }

    pub fn encode(&self, states: &[Obs]) -> Result<StateInput> {
        match self {
            FeatureSpec::OneHot { n_states } => states
                .iter()
                .map(|s| match s {
                    Obs::Index(i) if i < n_states => Ok(*i),
                    Obs::Index(i) => Err(Error::OutOfRange {
                        index: *i,
                        len: *n_states,
                    }),
                    Obs::Features(_) => Err(Error::InvalidConfig(
                        "one-hot features need tabular state indices".into(),
                    )),
                })
                .collect::<Result<_>>()
                .map(StateInput::Indices),
            FeatureSpec::Mlp { input_dim, .. } => {
                let mut data = Vec::with_capacity(states.len() * input_dim);
                for s in states {
                    match s {
                        Obs::Features(v) if v.len() == *input_dim => data.extend_from_slice(v),
                        Obs::Index(i) if i < input_dim => {
                            data.extend((0..*input_dim).map(|k| if k == *i { 1.0 } else { 0.0 }))
                        }
                        _ => {
                            return Err(Error::InvalidConfig(format!(
                                "state does not fit a {input_dim}-dimensional feature input"
                            )))
                        }
                    }
                }
                Ok(StateInput::Dense(Mat::new(states.len(), *input_dim, data)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateInput {
    Indices(Vec<usize>),
    Dense(Mat),
}

impl StateInput {
    pub fn len(&self) -> usize {
        match self {
            StateInput::Indices(v) => v.len(),
            StateInput::Dense(m) => m.rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> StateInput {
        match self {
            StateInput::Indices(v) => StateInput::Indices(rows.iter().map(|&r| v[r]).collect()),
            StateInput::Dense(m) => {
                let mut data = Vec::with_capacity(rows.len() * m.cols);
                for &r in rows {
                    data.extend_from_slice(m.row(r));
                }
                StateInput::Dense(Mat::new(rows.len(), m.cols, data))
            }
        }
    }
}

/// Hidden layer of an MLP feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpBlocks {
    pub w: Block,
    pub b: Block,
}

impl MlpBlocks {
    pub(crate) fn alloc(layout: &mut Layout, input: usize, width: usize) -> Self {
        Self {
            w: layout.block(input, width),
            b: layout.block(1, width),
        }
    }

    pub fn forward(&self, tape: &Tape, theta: Var, x: Var) -> Var {
        let z = tape.matmul(x, self.w.on(tape, theta));
        tape.tanh(tape.add_row(z, self.b.on(tape, theta)))
    }
}

/// Dense feature rows `phi(s)` for the factored and vanilla models.
pub(crate) fn dense_features(tape: &Tape, theta: Var, spec: &FeatureSpec, hidden: Option<&MlpBlocks>, input: &StateInput) -> Var {
    match (spec, input) {
        (FeatureSpec::OneHot { n_states }, StateInput::Indices(idx)) => tape.constant(one_hot(idx, *n_states)),
        (FeatureSpec::Mlp { .. }, StateInput::Dense(x)) => {
            let x = tape.constant(x.clone());
            hidden.expect("mlp features carry a hidden layer").forward(tape, theta, x)
        }
        _ => unreachable!("state input does not match the feature spec"),
    }
}

pub fn one_hot(idx: &[usize], n: usize) -> Mat {
    let mut m = Mat::zeros(idx.len(), n);
    for (i, &k) in idx.iter().enumerate() {
        m.data[i * n + k] = 1.0;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete { n: usize },
    Continuous { dim: usize },
}

impl ActionSpace {
    pub fn encode(&self, actions: &[Action]) -> Result<ActionInput> {
        match self {
            ActionSpace::Discrete { n } => actions
                .iter()
                .map(|a| match a {
                    Action::Discrete(i) if i < n => Ok(*i),
                    Action::Discrete(i) => Err(Error::OutOfRange { index: *i, len: *n }),
                    Action::Continuous(_) => Err(Error::InvalidConfig("expected a discrete action".into())),
                })
                .collect::<Result<_>>()
                .map(ActionInput::Indices),
            ActionSpace::Continuous { dim } => {
                let mut data = Vec::with_capacity(actions.len() * dim);
                for a in actions {
                    match a {
                        Action::Continuous(v) if v.len() == *dim => data.extend_from_slice(v),
                        _ => {
                            return Err(Error::InvalidConfig(format!(
                                "expected a {dim}-dimensional continuous action"
                            )))
                        }
                    }
                }
                Ok(ActionInput::Dense(Mat::new(actions.len(), *dim, data)))
            }
        }
    }

    pub fn all_actions(&self) -> Option<Vec<Action>> {
        match self {
            ActionSpace::Discrete { n } => Some((0..*n).map(Action::Discrete).collect()),
            ActionSpace::Continuous { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionInput {
    Indices(Vec<usize>),
    Dense(Mat),
}

impl ActionInput {
    pub fn len(&self) -> usize {
        match self {
            ActionInput::Indices(v) => v.len(),
            ActionInput::Dense(m) => m.rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> ActionInput {
        match self {
            ActionInput::Indices(v) => ActionInput::Indices(rows.iter().map(|&r| v[r]).collect()),
            ActionInput::Dense(m) => {
                let mut data = Vec::with_capacity(rows.len() * m.cols);
                for &r in rows {
                    data.extend_from_slice(m.row(r));
                }
                ActionInput::Dense(Mat::new(rows.len(), m.cols, data))
            }
        }
    }
}

/// A training batch with RTG labels already bucketed.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: StateInput,
    pub actions: ActionInput,
    pub buckets: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            states: self.states.select(rows),
            actions: self.actions.select(rows),
            buckets: rows.iter().map(|&r| self.buckets[r]).collect(),
        }
    }
}

/// The queries inference needs from a BR model: the action prior and the
/// RTG head. Discrete models answer exactly; continuous ones sample.
pub trait BayesModel: Sync {
    fn buckets(&self) -> &BucketSpec;

    fn action_space(&self) -> ActionSpace;

    /// `log beta(a | s)` for each action, floored.
    fn log_prior(&self, s: &Obs, actions: &[Action]) -> Result<Vec<f64>>;

    /// `beta(R | s, a)` over buckets, one row per action.
    fn rtg_probs(&self, s: &Obs, actions: &[Action]) -> Result<Vec<Vec<f64>>>;

    fn sample_prior(&self, s: &Obs, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Action>>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_examples() {
        assert_eq!(energy(1.0, 1.0), 0.0);
        assert!((energy(0.5, 0.25) - 8f64.ln()).abs() < 1e-15);
        assert!(energy(0.4, 0.25) > energy(0.5, 0.25));
        assert!(energy(0.5, 0.2) > energy(0.5, 0.25));
        assert!(energy(0.0, 0.0).is_finite());
    }

    #[test]
    fn feature_encoding_checks_shapes() {
        let oh = FeatureSpec::OneHot { n_states: 3 };
        assert_eq!(oh.encode(&[Obs::Index(2)]).unwrap(), StateInput::Indices(vec![2]));
        assert!(oh.encode(&[Obs::Index(3)]).is_err());
        let mlp = FeatureSpec::Mlp { input_dim: 2, width: 4 };
        assert!(mlp.encode(&[Obs::Features(vec![1.0])]).is_err());
        assert_eq!(
            mlp.encode(&[Obs::Index(1)]).unwrap(),
            StateInput::Dense(Mat::new(1, 2, vec![0.0, 1.0]))
        );
    }
}
