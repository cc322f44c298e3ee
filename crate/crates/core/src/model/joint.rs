//! Discrete joint model `beta(a, R | s)`: one softmax over all
//! `|A| * |B|` (action, bucket) pairs.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{
    init_rng, init_uniform, xavier, ActionSpace, Batch, BayesModel, Block, FeatureSpec, Init, Layout, MlpBlocks,
    StateInput, OUTPUT_INIT_SCALE,
};
use crate::autodiff::{Mat, Tape, Var};
use crate::bucket::BucketSpec;
use crate::dataset::{Action, Obs};
use crate::error::{Error, Result};
use crate::util::{floored_ln, sample_index};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub features: FeatureSpec,
    pub n_actions: usize,
    pub buckets: BucketSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct JointBlocks {
    hidden: Option<MlpBlocks>,
    w: Block,
    b: Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    config: JointConfig,
    blocks: JointBlocks,
    params: Vec<f64>,
}

impl JointModel {
    pub fn new(config: JointConfig, init: Init, seed: u64) -> Result<Self> {
        if config.n_actions == 0 {
            return Err(Error::InvalidConfig("need at least one action".into()));
        }
        let out = config.n_actions * config.buckets.len();
        let mut layout = Layout::default();
        let (hidden, w) = match config.features {
            FeatureSpec::OneHot { n_states } => (None, layout.block(n_states, out)),
            FeatureSpec::Mlp { input_dim, width } => {
                let h = MlpBlocks::alloc(&mut layout, input_dim, width);
                (Some(h), layout.block(width, out))
            }
        };
        let b = layout.block(1, out);
        let blocks = JointBlocks { hidden, w, b };
        let mut params = vec![0.0; layout.size()];
        if init == Init::Default {
            let mut rng = init_rng(seed);
            if let Some(h) = hidden {
                xavier(&mut params, h.w, &mut rng);
            }
            init_uniform(&mut params, w, OUTPUT_INIT_SCALE, &mut rng);
        }
        Ok(Self { config, blocks, params })
    }

    /// A model with explicit parameters, e.g. from a checkpoint.
    pub fn from_params(config: JointConfig, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(config, Init::Zero, 0)?;
        m.set_params(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &JointConfig {
        &self.config
    }

    pub fn n_actions(&self) -> usize {
        self.config.n_actions
    }

    pub fn n_buckets(&self) -> usize {
        self.config.buckets.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// A one-hot model whose joint at state `s` is `probs[s][a][b]`. Zero
    /// entries get a logit of `ln 1e-30`.
    pub fn from_joint_probs(config: JointConfig, probs: &[Vec<Vec<f64>>]) -> Result<Self> {
        let FeatureSpec::OneHot { n_states } = config.features else {
            return Err(Error::Unsupported("explicit joint tables need one-hot features".into()));
        };
        if probs.len() != n_states {
            return Err(Error::OutOfRange {
                index: probs.len(),
                len: n_states,
            });
        }
        let mut m = Self::new(config, Init::Zero, 0)?;
        for (s, rows) in probs.iter().enumerate() {
            if rows.len() != config.n_actions || rows.iter().any(|r| r.len() != config.buckets.len()) {
                return Err(Error::InvalidConfig(format!("joint table at state {s} has the wrong shape")));
            }
            for (a, row) in rows.iter().enumerate() {
                for (b, p) in row.iter().enumerate() {
                    m.set_table_logit(s, a, b, p.max(1e-30).ln());
                }
            }
        }
        Ok(m)
    }

    /// For a one-hot model, the logit of `(a, b)` at state `s` is
    /// `table[s][a * B + b] + bias[a * B + b]`; this writes the table entry.
    pub fn set_table_logit(&mut self, s: usize, a: usize, b: usize, value: f64) {
        assert!(self.blocks.hidden.is_none(), "only one-hot models have a logit table");
        let idx = self.blocks.w.offset + s * self.blocks.w.cols + a * self.n_buckets() + b;
        self.params[idx] = value;
    }

    pub fn encode_batch(&self, states: &[Obs], actions: &[Action], rtg: &[f64]) -> Result<Batch> {
        Ok(Batch {
            states: self.config.features.encode(states)?,
            actions: self.action_space().encode(actions)?,
            buckets: rtg.iter().map(|r| self.config.buckets.discretize(*r)).collect(),
        })
    }

    /// `n x (A * B)` logits, column `a * B + b`.
    pub fn logits(&self, tape: &Tape, theta: Var, states: &StateInput) -> Var {
        let bias = self.blocks.b.on(tape, theta);
        let z = match (self.blocks.hidden, states) {
            (None, StateInput::Indices(idx)) => tape.gather_rows(self.blocks.w.on(tape, theta), idx.clone()),
            (Some(h), StateInput::Dense(x)) => {
                let x = tape.constant(x.clone());
                tape.matmul(h.forward(tape, theta, x), self.blocks.w.on(tape, theta))
            }
            _ => unreachable!("state input does not match the feature spec"),
        };
        tape.add_row(z, bias)
    }

    pub fn log_joint(&self, tape: &Tape, theta: Var, states: &StateInput) -> Var {
        tape.log_softmax_rows(self.logits(tape, theta, states))
    }

    /// `log beta(a_i | s_i, R_i)`, an `n x 1` column.
    pub fn log_conditional(&self, tape: &Tape, theta: Var, batch: &Batch) -> Var {
        let (na, nb) = (self.n_actions(), self.n_buckets());
        let lj = self.log_joint(tape, theta, &batch.states);
        let cols = batch.buckets.iter().flat_map(|&b| (0..na).map(move |a| a * nb + b)).collect();
        let column = tape.log_softmax_rows(tape.gather_cols(lj, cols));
        tape.pick(column, discrete(&batch.actions).to_vec())
    }

    /// `log beta(R_i | s_i, a_i)`, an `n x 1` column.
    pub fn log_rtg(&self, tape: &Tape, theta: Var, batch: &Batch) -> Var {
        let nb = self.n_buckets();
        let lj = self.log_joint(tape, theta, &batch.states);
        let cols = discrete(&batch.actions).iter().flat_map(|&a| (0..nb).map(move |b| a * nb + b)).collect();
        let row = tape.log_softmax_rows(tape.gather_cols(lj, cols));
        tape.pick(row, batch.buckets.clone())
    }

    fn joint_mat(&self, states: &[Obs]) -> Result<Mat> {
        let input = self.config.features.encode(states)?;
        let tape = Tape::new();
        let theta = tape.leaf(Mat::row_vector(self.params.clone()));
        let lj = self.log_joint(&tape, theta, &input);
        let mut m = tape.value(lj);
        m.data.iter_mut().for_each(|x| *x = x.exp());
        Ok(m)
    }

    /// `|A| x |B|` matrix of `beta(a, R | s)`.
    pub fn joint_prob(&self, s: &Obs) -> Result<Vec<Vec<f64>>> {
        let m = self.joint_mat(std::slice::from_ref(s))?;
        let nb = self.n_buckets();
        Ok(m.data.chunks(nb).map(<[f64]>::to_vec).collect())
    }

    pub fn marginal_action_prob(&self, s: &Obs) -> Result<Vec<f64>> {
        Ok(marginal_from_joint(&self.joint_prob(s)?))
    }

    pub fn rtg_prob(&self, s: &Obs, a: usize) -> Result<Vec<f64>> {
        if a >= self.n_actions() {
            return Err(Error::OutOfRange {
                index: a,
                len: self.n_actions(),
            });
        }
        let joint = self.joint_prob(s)?;
        let z: f64 = joint[a].iter().sum();
        Ok(joint[a].iter().map(|p| p / z).collect())
    }

    /// `beta(a | s, R = b)`: column `b` of the joint, renormalized.
    pub fn conditional_action_prob(&self, s: &Obs, b: usize) -> Result<Vec<f64>> {
        conditional_from_joint(&self.joint_prob(s)?, b)
    }
}

fn discrete(actions: &super::ActionInput) -> &[usize] {
    match actions {
        super::ActionInput::Indices(v) => v,
        super::ActionInput::Dense(_) => panic!("joint model needs discrete actions"),
    }
}

/// Row sums of a joint `[a][b]` table, buckets summed in ascending order.
pub fn marginal_from_joint(joint: &[Vec<f64>]) -> Vec<f64> {
    joint.iter().map(|row| row.iter().sum()).collect()
}

pub fn conditional_from_joint(joint: &[Vec<f64>], b: usize) -> Result<Vec<f64>> {
    let nb = joint.first().map_or(0, Vec::len);
    if b >= nb {
        return Err(Error::OutOfRange { index: b, len: nb });
    }
    let col: Vec<f64> = joint.iter().map(|row| row[b]).collect();
    let z: f64 = col.iter().sum();
    if z <= 0.0 {
        return Err(Error::OodConditioning { bucket: b });
    }
    Ok(col.into_iter().map(|p| p / z).collect())
}

impl BayesModel for JointModel {
    fn buckets(&self) -> &BucketSpec {
        &self.config.buckets
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete { n: self.n_actions() }
    }

    fn log_prior(&self, s: &Obs, actions: &[Action]) -> Result<Vec<f64>> {
        let marginal = self.marginal_action_prob(s)?;
        let idx = match self.action_space().encode(actions)? {
            super::ActionInput::Indices(v) => v,
            super::ActionInput::Dense(_) => unreachable!(),
        };
        Ok(idx.into_iter().map(|a| floored_ln(marginal[a])).collect())
    }

    fn rtg_probs(&self, s: &Obs, actions: &[Action]) -> Result<Vec<Vec<f64>>> {
        let joint = self.joint_prob(s)?;
        actions
            .iter()
            .map(|a| {
                let a = a.index().ok_or_else(|| Error::InvalidConfig("expected a discrete action".into()))?;
                let row = joint.get(a).ok_or(Error::OutOfRange {
                    index: a,
                    len: joint.len(),
                })?;
                let z: f64 = row.iter().sum();
                Ok(row.iter().map(|p| p / z).collect())
            })
            .collect()
    }

    fn sample_prior(&self, s: &Obs, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Action>> {
        let marginal = self.marginal_action_prob(s)?;
        Ok((0..n).map(|_| Action::Discrete(sample_index(&marginal, rng))).collect())
    }
}
