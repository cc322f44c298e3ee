//! Vanilla reward-conditioned policies and behavior cloning.
//!
//! The vanilla model feeds the one-hot RTG bucket next to the state
//! features and predicts the action directly. Behavior cloning is the same
//! network with the RTG input held at zero.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::bucket::BucketSpec;
use crate::dataset::{Action, Dataset, Obs};
use crate::error::{Error, Result};
use crate::model::{
    dense_features, init_rng, init_uniform, one_hot, xavier, ActionInput, ActionSpace, Batch, Block, FeatureSpec,
    Init, Layout, MlpBlocks, StateInput, OUTPUT_INIT_SCALE,
};
use crate::training::{optimize, LossCurve, TrainConfig};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyHead {
    Discrete {
        n_actions: usize,
    },
    Gaussian {
        action_dim: usize,
        log_std_min: f64,
        log_std_max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VanillaConfig {
    pub features: FeatureSpec,
    pub head: PolicyHead,
    pub buckets: BucketSpec,
    /// Width of the tanh layer over `[phi(s), onehot(R)]`; 0 means linear.
    pub hidden_width: usize,
    /// False for behavior cloning.
    pub use_rtg: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct VanillaBlocks {
    features: Option<MlpBlocks>,
    hidden: Option<MlpBlocks>,
    w: Block,
    b: Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanillaModel {
    config: VanillaConfig,
    blocks: VanillaBlocks,
    params: Vec<f64>,
}

impl VanillaModel {
    pub fn new(config: VanillaConfig, init: Init, seed: u64) -> Result<Self> {
        let out = match config.head {
            PolicyHead::Discrete { n_actions } if n_actions > 0 => n_actions,
            PolicyHead::Gaussian {
                action_dim,
                log_std_min,
                log_std_max,
            } if action_dim > 0 && log_std_min < log_std_max => 2 * action_dim,
            _ => return Err(Error::InvalidConfig("bad policy head".into())),
        };
        let mut layout = Layout::default();
        let features = match config.features {
            FeatureSpec::OneHot { .. } => None,
            FeatureSpec::Mlp { input_dim, width } => Some(MlpBlocks::alloc(&mut layout, input_dim, width)),
        };
        let input = config.features.dim() + config.buckets.len();
        let (hidden, last) = if config.hidden_width > 0 {
            (Some(MlpBlocks::alloc(&mut layout, input, config.hidden_width)), config.hidden_width)
        } else {
            (None, input)
        };
        let w = layout.block(last, out);
        let b = layout.block(1, out);
        let blocks = VanillaBlocks { features, hidden, w, b };
        let mut params = vec![0.0; layout.size()];
        if init == Init::Default {
            let mut rng = init_rng(seed);
            for h in [features, hidden].into_iter().flatten() {
                xavier(&mut params, h.w, &mut rng);
            }
            init_uniform(&mut params, w, OUTPUT_INIT_SCALE, &mut rng);
        }
        Ok(Self { config, blocks, params })
    }

    pub fn from_params(config: VanillaConfig, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(config, Init::Zero, 0)?;
        if params.len() != m.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &VanillaConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn action_space(&self) -> ActionSpace {
        match self.config.head {
            PolicyHead::Discrete { n_actions } => ActionSpace::Discrete { n: n_actions },
            PolicyHead::Gaussian { action_dim, .. } => ActionSpace::Continuous { dim: action_dim },
        }
    }

    pub fn encode_batch(&self, states: &[Obs], actions: &[Action], rtg: &[f64]) -> Result<Batch> {
        Ok(Batch {
            states: self.config.features.encode(states)?,
            actions: self.action_space().encode(actions)?,
            buckets: rtg.iter().map(|r| self.config.buckets.discretize(*r)).collect(),
        })
    }

    /// Raw outputs: action logits, or `[mean, log_std]` columns.
    pub fn outputs(&self, tape: &Tape, theta: Var, states: &StateInput, buckets: &[usize]) -> Var {
        let phi = dense_features(tape, theta, &self.config.features, self.blocks.features.as_ref(), states);
        let nb = self.config.buckets.len();
        let r = if self.config.use_rtg {
            one_hot(buckets, nb)
        } else {
            Mat::zeros(buckets.len(), nb)
        };
        let mut x = tape.concat_cols(phi, tape.constant(r));
        if let Some(h) = self.blocks.hidden {
            x = h.forward(tape, theta, x);
        }
        tape.add_row(tape.matmul(x, self.blocks.w.on(tape, theta)), self.blocks.b.on(tape, theta))
    }

    /// `log pi(a_i | s_i, R_i)` as an `n x 1` column.
    pub fn log_likelihood(&self, tape: &Tape, theta: Var, batch: &Batch) -> Var {
        let out = self.outputs(tape, theta, &batch.states, &batch.buckets);
        match (self.config.head, &batch.actions) {
            (PolicyHead::Discrete { .. }, ActionInput::Indices(a)) => tape.pick(tape.log_softmax_rows(out), a.clone()),
            (
                PolicyHead::Gaussian {
                    action_dim,
                    log_std_min,
                    log_std_max,
                },
                ActionInput::Dense(a),
            ) => {
                let n = a.rows;
                let mean = tape.gather_cols(out, (0..n).flat_map(|_| 0..action_dim).collect());
                let ls = tape.gather_cols(out, (0..n).flat_map(|_| action_dim..2 * action_dim).collect());
                let ls = tape.clamp(ls, log_std_min, log_std_max);
                let z = tape.mul(tape.sub(tape.constant(a.clone()), mean), tape.exp(tape.neg(ls)));
                let per_dim = tape.add(tape.scale(tape.mul(z, z), -0.5), tape.neg(ls));
                tape.add_scalar(tape.sum_rows(per_dim), -(action_dim as f64) * HALF_LN_2PI)
            }
            _ => panic!("action encoding does not match the policy head"),
        }
    }

    /// `pi(. | s, R = bucket)` for a discrete head.
    pub fn action_probs(&self, s: &Obs, bucket: usize) -> Result<Vec<f64>> {
        let PolicyHead::Discrete { .. } = self.config.head else {
            return Err(Error::Unsupported("action probabilities of a continuous policy".into()));
        };
        if bucket >= self.config.buckets.len() {
            return Err(Error::OutOfRange {
                index: bucket,
                len: self.config.buckets.len(),
            });
        }
        let input = self.config.features.encode(std::slice::from_ref(s))?;
        let tape = Tape::new();
        let theta = tape.leaf(Mat::row_vector(self.params.clone()));
        let lp = tape.log_softmax_rows(self.outputs(&tape, theta, &input, &[bucket]));
        Ok(tape.value(lp).data.into_iter().map(f64::exp).collect())
    }

    /// Mean action of a Gaussian head.
    pub fn mean_action(&self, s: &Obs, bucket: usize) -> Result<Vec<f64>> {
        let PolicyHead::Gaussian { action_dim, .. } = self.config.head else {
            return Err(Error::Unsupported("mean action of a discrete policy".into()));
        };
        let input = self.config.features.encode(std::slice::from_ref(s))?;
        let tape = Tape::new();
        let theta = tape.leaf(Mat::row_vector(self.params.clone()));
        let out = tape.value(self.outputs(&tape, theta, &input, &[bucket]));
        Ok(out.data[..action_dim].to_vec())
    }

    /// Mean negative log-likelihood over a whole dataset.
    pub fn dataset_loss(&self, dataset: &Dataset) -> Result<f64> {
        let batch = encode_dataset(self, dataset)?;
        let tape = Tape::new();
        let theta = tape.leaf(Mat::row_vector(self.params.clone()));
        let ll = self.log_likelihood(&tape, theta, &batch);
        Ok(-tape.scalar(tape.mean(ll)))
    }
}

fn encode_dataset(model: &VanillaModel, dataset: &Dataset) -> Result<Batch> {
    let states: Vec<Obs> = dataset.transitions().iter().map(|t| t.state.clone()).collect();
    let actions: Vec<Action> = dataset.transitions().iter().map(|t| t.action.clone()).collect();
    model.encode_batch(&states, &actions, dataset.rtg())
}

fn fit(model: &VanillaModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<(VanillaModel, LossCurve)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("cannot train on an empty dataset".into()));
    }
    let data = encode_dataset(model, dataset)?;
    let mut params = model.params.clone();
    let curve = optimize(&mut params, cfg, data.len(), |tape, theta, rows, _rng| {
        let batch = data.select(rows);
        let l0 = tape.neg(tape.mean(model.log_likelihood(tape, theta, &batch)));
        (l0, None)
    })?;
    let mut out = model.clone();
    out.params = params;
    Ok((out, curve))
}

/// Minimizes `-mean log pi(a_i | s_i, bucket(R_i))`.
pub fn train_vanilla(model: &VanillaModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<(VanillaModel, LossCurve)> {
    if !model.config.use_rtg {
        return Err(Error::InvalidConfig("vanilla training needs an RTG-conditioned model".into()));
    }
    fit(model, dataset, cfg)
}

/// Minimizes `-mean log pi(a_i | s_i)` with the RTG input zeroed.
pub fn train_bc(model: &VanillaModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<(VanillaModel, LossCurve)> {
    if model.config.use_rtg {
        return Err(Error::InvalidConfig("behavior cloning needs a model with use_rtg = false".into()));
    }
    fit(model, dataset, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Transition;

    fn config(use_rtg: bool) -> VanillaConfig {
        VanillaConfig {
            features: FeatureSpec::OneHot { n_states: 1 },
            head: PolicyHead::Discrete { n_actions: 2 },
            buckets: BucketSpec::new(0.0, 1.0, 2).unwrap(),
            hidden_width: 0,
            use_rtg,
        }
    }

    fn one_state_dataset(actions: &[usize]) -> Dataset {
        let trs = actions
            .iter()
            .enumerate()
            .map(|(i, &a)| Transition {
                episode_id: i as u64,
                t: 0,
                state: Obs::Index(0),
                action: Action::Discrete(a),
                reward: a as f64,
                done: true,
            })
            .collect();
        Dataset::new(trs, 1.0).unwrap()
    }

    #[test]
    fn zero_iterations_uniform() {
        let m = VanillaModel::new(config(true), Init::Zero, 0).unwrap();
        let cfg = TrainConfig {
            n_iterations: 0,
            ..TrainConfig::default()
        };
        let (m, curve) = train_vanilla(&m, &one_state_dataset(&[0, 1]), &cfg).unwrap();
        assert!(curve.is_empty());
        assert_eq!(m.action_probs(&Obs::Index(0), 1).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn memorizes_one_state() {
        let m = VanillaModel::new(config(true), Init::Default, 0).unwrap();
        let cfg = TrainConfig {
            n_iterations: 2000,
            learning_rate: 0.05,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let ds = one_state_dataset(&[1, 1, 1]);
        let (m, _) = train_vanilla(&m, &ds, &cfg).unwrap();
        assert!(m.dataset_loss(&ds).unwrap() < 1e-2);
    }

    #[test]
    fn bc_contract() {
        let ds = one_state_dataset(&[0]);
        let cfg = TrainConfig::default();
        assert!(train_bc(&VanillaModel::new(config(true), Init::Zero, 0).unwrap(), &ds, &cfg).is_err());
        let bc = VanillaModel::new(config(false), Init::Zero, 0).unwrap();
        assert!(train_bc(&bc, &Dataset::empty(1.0), &cfg).is_err());
        assert!(train_vanilla(&bc, &ds, &cfg).is_err());
    }
}
