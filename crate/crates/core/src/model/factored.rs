//! Factored model `beta(a | s) * beta(R | s, a)` for actions that cannot be
//! enumerated. The prior is a diagonal Gaussian; a categorical prior over
//! one-hot embedded actions is also available so that the continuous code
//! path can be checked against exact sums on small discrete problems.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    dense_features, init_rng, init_uniform, one_hot, xavier, ActionInput, ActionSpace, Batch, BayesModel, Block,
    FeatureSpec, Init, JointConfig, JointModel, Layout, MlpBlocks, StateInput, OUTPUT_INIT_SCALE,
};
use crate::autodiff::{Mat, Tape, Var};
use crate::bucket::BucketSpec;
use crate::dataset::{Action, Obs};
use crate::error::{Error, Result};
use crate::util::{sample_index, PROB_FLOOR};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Gaussian {
        action_dim: usize,
        log_std_min: f64,
        log_std_max: f64,
    },
    Categorical {
        n_actions: usize,
    },
}

impl PriorSpec {
    pub fn gaussian(action_dim: usize) -> Self {
        PriorSpec::Gaussian {
            action_dim,
            log_std_min: -5.0,
            log_std_max: 2.0,
        }
    }

    /// Width of the action encoding fed to the RTG head.
    pub fn action_dim(&self) -> usize {
        match self {
            PriorSpec::Gaussian { action_dim, .. } => *action_dim,
            PriorSpec::Categorical { n_actions } => *n_actions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactoredConfig {
    pub features: FeatureSpec,
    pub prior: PriorSpec,
    pub buckets: BucketSpec,
    pub head_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FactoredBlocks {
    hidden: Option<MlpBlocks>,
    prior_w: Block,
    prior_b: Block,
    head: MlpBlocks,
    out_w: Block,
    out_b: Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactoredModel {
    config: FactoredConfig,
    blocks: FactoredBlocks,
    params: Vec<f64>,
}

/// Prior outputs on the tape.
pub enum PriorOut {
    Gaussian { mean: Var, log_std: Var },
    Categorical { log_probs: Var },
}

impl FactoredModel {
    pub fn new(config: FactoredConfig, init: Init, seed: u64) -> Result<Self> {
        match config.prior {
            PriorSpec::Gaussian {
                action_dim,
                log_std_min,
                log_std_max,
            } => {
                if action_dim == 0 || log_std_min >= log_std_max {
                    return Err(Error::InvalidConfig("bad Gaussian prior specification".into()));
                }
            }
            PriorSpec::Categorical { n_actions } => {
                if n_actions == 0 {
                    return Err(Error::InvalidConfig("need at least one action".into()));
                }
            }
        }
        if config.head_width == 0 {
            return Err(Error::InvalidConfig("head width must be positive".into()));
        }
        let mut layout = Layout::default();
        let hidden = match config.features {
            FeatureSpec::OneHot { .. } => None,
            FeatureSpec::Mlp { input_dim, width } => Some(MlpBlocks::alloc(&mut layout, input_dim, width)),
        };
        let d = config.features.dim();
        let prior_out = match config.prior {
            PriorSpec::Gaussian { action_dim, .. } => 2 * action_dim,
            PriorSpec::Categorical { n_actions } => n_actions,
        };
        let prior_w = layout.block(d, prior_out);
        let prior_b = layout.block(1, prior_out);
        let head = MlpBlocks::alloc(&mut layout, d + config.prior.action_dim(), config.head_width);
        let out_w = layout.block(config.head_width, config.buckets.len());
        let out_b = layout.block(1, config.buckets.len());
        let blocks = FactoredBlocks {
            hidden,
            prior_w,
            prior_b,
            head,
            out_w,
            out_b,
        };
        let mut params = vec![0.0; layout.size()];
        if init == Init::Default {
            let mut rng = init_rng(seed);
            if let Some(h) = hidden {
                xavier(&mut params, h.w, &mut rng);
            }
            init_uniform(&mut params, prior_w, OUTPUT_INIT_SCALE, &mut rng);
            xavier(&mut params, head.w, &mut rng);
            init_uniform(&mut params, out_w, OUTPUT_INIT_SCALE, &mut rng);
        }
        Ok(Self { config, blocks, params })
    }

    pub fn from_params(config: FactoredConfig, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(config, Init::Zero, 0)?;
        m.set_params(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &FactoredConfig {
        &self.config
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

    /// Sets the RTG head's output bias and zeroes its output weights, making
    /// `beta(R | s, a)` the softmax of `logits` for every `(s, a)`.
    pub fn set_constant_head(&mut self, logits: &[f64]) {
        assert_eq!(logits.len(), self.config.buckets.len());
        for p in &mut self.params[self.blocks.out_w.range()] {
            *p = 0.0;
        }
        self.params[self.blocks.out_b.range()].copy_from_slice(logits);
    }

    pub fn encode_batch(&self, states: &[Obs], actions: &[Action], rtg: &[f64]) -> Result<Batch> {
        Ok(Batch {
            states: self.config.features.encode(states)?,
            actions: self.action_space().encode(actions)?,
            buckets: rtg.iter().map(|r| self.config.buckets.discretize(*r)).collect(),
        })
    }

    pub fn features(&self, tape: &Tape, theta: Var, states: &StateInput) -> Var {
        dense_features(tape, theta, &self.config.features, self.blocks.hidden.as_ref(), states)
    }

    pub fn prior(&self, tape: &Tape, theta: Var, phi: Var) -> PriorOut {
        let out = tape.add_row(
            tape.matmul(phi, self.blocks.prior_w.on(tape, theta)),
            self.blocks.prior_b.on(tape, theta),
        );
        match self.config.prior {
            PriorSpec::Gaussian {
                action_dim,
                log_std_min,
                log_std_max,
            } => {
                let n = tape.shape(out).0;
                let mean_idx = (0..n).flat_map(|_| 0..action_dim).collect();
                let ls_idx = (0..n).flat_map(|_| action_dim..2 * action_dim).collect();
                let mean = tape.gather_cols(out, mean_idx);
                let log_std = tape.clamp(tape.gather_cols(out, ls_idx), log_std_min, log_std_max);
                PriorOut::Gaussian { mean, log_std }
            }
            PriorSpec::Categorical { .. } => PriorOut::Categorical {
                log_probs: tape.log_softmax_rows(out),
            },
        }
    }

    pub fn action_matrix(&self, actions: &ActionInput) -> Mat {
        match actions {
            ActionInput::Indices(idx) => one_hot(idx, self.config.prior.action_dim()),
            ActionInput::Dense(m) => m.clone(),
        }
    }

    /// `log beta(a_i | s_i)` as an `n x 1` column (a log-density for the Gaussian prior).
    pub fn log_prior_on(&self, tape: &Tape, prior: &PriorOut, actions: &ActionInput) -> Var {
        match (prior, actions) {
            (PriorOut::Gaussian { mean, log_std }, ActionInput::Dense(a)) => {
                let a = tape.constant(a.clone());
                let z = tape.mul(tape.sub(a, *mean), tape.exp(tape.neg(*log_std)));
                let per_dim = tape.add(tape.scale(tape.mul(z, z), -0.5), tape.neg(*log_std));
                let d = tape.shape(z).1 as f64;
                tape.add_scalar(tape.sum_rows(per_dim), -d * HALF_LN_2PI)
            }
            (PriorOut::Categorical { log_probs }, ActionInput::Indices(idx)) => tape.pick(*log_probs, idx.clone()),
            _ => panic!("action encoding does not match the prior"),
        }
    }

    /// Log-softmax over buckets of the RTG head, one row per (feature row, action row) pair.
    pub fn rtg_log_probs(&self, tape: &Tape, theta: Var, phi_rows: Var, actions: Var) -> Var {
        let x = tape.concat_cols(phi_rows, actions);
        let h = self.blocks.head.forward(tape, theta, x);
        let logits = tape.add_row(
            tape.matmul(h, self.blocks.out_w.on(tape, theta)),
            self.blocks.out_b.on(tape, theta),
        );
        tape.log_softmax_rows(logits)
    }

    fn theta_tape(&self) -> (Tape, Var) {
        let tape = Tape::new();
        let theta = tape.leaf(Mat::row_vector(self.params.clone()));
        (tape, theta)
    }

    /// `beta(a | s)` for every action of a categorical prior.
    pub fn prior_probs(&self, s: &Obs) -> Result<Vec<f64>> {
        let PriorSpec::Categorical { .. } = self.config.prior else {
            return Err(Error::Unsupported("prior probabilities of a continuous prior".into()));
        };
        let input = self.config.features.encode(std::slice::from_ref(s))?;
        let (tape, theta) = self.theta_tape();
        let phi = self.features(&tape, theta, &input);
        let PriorOut::Categorical { log_probs } = self.prior(&tape, theta, phi) else {
            unreachable!()
        };
        Ok(tape.value(log_probs).data.into_iter().map(f64::exp).collect())
    }

    /// `(mean, std)` of a Gaussian prior at `s`.
    pub fn gaussian_params(&self, s: &Obs) -> Result<(Vec<f64>, Vec<f64>)> {
        let input = self.config.features.encode(std::slice::from_ref(s))?;
        let (tape, theta) = self.theta_tape();
        let phi = self.features(&tape, theta, &input);
        match self.prior(&tape, theta, phi) {
            PriorOut::Gaussian { mean, log_std } => Ok((
                tape.value(mean).data,
                tape.value(log_std).data.into_iter().map(f64::exp).collect(),
            )),
            PriorOut::Categorical { .. } => Err(Error::Unsupported("Gaussian parameters of a categorical prior".into())),
        }
    }

    /// `E(a | s, R) = -log beta(a | s) - log beta(R | s, a)`, both floored.
    pub fn energy(&self, s: &Obs, a: &Action, bucket: usize) -> Result<f64> {
        let lp = self.log_prior(s, std::slice::from_ref(a))?[0];
        let pr = self.rtg_probs(s, std::slice::from_ref(a))?[0][bucket];
        Ok(-lp - pr.max(PROB_FLOOR).ln())
    }

    /// The exact normalizer `sum_a beta(a | s) beta(R | s, a)` of a categorical prior.
    pub fn exact_normalizer(&self, s: &Obs, bucket: usize) -> Result<f64> {
        let prior = self.prior_probs(s)?;
        let actions: Vec<Action> = (0..prior.len()).map(Action::Discrete).collect();
        let rows = self.rtg_probs(s, &actions)?;
        Ok(prior.iter().zip(&rows).map(|(p, r)| p * r[bucket]).sum())
    }

    /// The joint table of a tabular categorical model as a [`JointModel`]:
    /// its logits are `log beta(a | s) + log beta(R | s, a)`.
    pub fn to_joint(&self) -> Result<JointModel> {
        let (FeatureSpec::OneHot { n_states }, PriorSpec::Categorical { n_actions }) =
            (self.config.features, self.config.prior)
        else {
            return Err(Error::Unsupported("only tabular categorical models have a joint table".into()));
        };
        let cfg = JointConfig {
            features: self.config.features,
            n_actions,
            buckets: self.config.buckets,
        };
        let mut joint = JointModel::new(cfg, Init::Zero, 0)?;
        let actions: Vec<Action> = (0..n_actions).map(Action::Discrete).collect();
        for s in 0..n_states {
            let obs = Obs::Index(s);
            let prior = self.log_prior(&obs, &actions)?;
            let rows = self.rtg_probs(&obs, &actions)?;
            for a in 0..n_actions {
                for (b, p) in rows[a].iter().enumerate() {
                    joint.set_table_logit(s, a, b, prior[a] + p.ln());
                }
            }
        }
        Ok(joint)
    }
}

impl BayesModel for FactoredModel {
    fn buckets(&self) -> &BucketSpec {
        &self.config.buckets
    }

    fn action_space(&self) -> ActionSpace {
        match self.config.prior {
            PriorSpec::Gaussian { action_dim, .. } => ActionSpace::Continuous { dim: action_dim },
            PriorSpec::Categorical { n_actions } => ActionSpace::Discrete { n: n_actions },
        }
    }

    fn log_prior(&self, s: &Obs, actions: &[Action]) -> Result<Vec<f64>> {
        let input = self.config.features.encode(std::slice::from_ref(s))?;
        let acts = self.action_space().encode(actions)?;
        let (tape, theta) = self.theta_tape();
        let phi = self.features(&tape, theta, &input);
        let phi = tape.gather_rows(phi, vec![0; actions.len()]);
        let prior = self.prior(&tape, theta, phi);
        let lp = self.log_prior_on(&tape, &prior, &acts);
        Ok(tape.value(lp).data.into_iter().map(|x| x.max(PROB_FLOOR.ln())).collect())
    }

    fn rtg_probs(&self, s: &Obs, actions: &[Action]) -> Result<Vec<Vec<f64>>> {
        let input = self.config.features.encode(std::slice::from_ref(s))?;
        let acts = self.action_space().encode(actions)?;
        let (tape, theta) = self.theta_tape();
        let phi = self.features(&tape, theta, &input);
        let phi = tape.gather_rows(phi, vec![0; actions.len()]);
        let a = tape.constant(self.action_matrix(&acts));
        let lp = tape.value(self.rtg_log_probs(&tape, theta, phi, a));
        Ok((0..lp.rows).map(|i| lp.row(i).iter().map(|x| x.exp()).collect()).collect())
    }

    fn sample_prior(&self, s: &Obs, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Action>> {
        match self.config.prior {
            PriorSpec::Categorical { .. } => {
                let p = self.prior_probs(s)?;
                Ok((0..n).map(|_| Action::Discrete(sample_index(&p, rng))).collect())
            }
            PriorSpec::Gaussian { .. } => {
                let (mean, std) = self.gaussian_params(s)?;
                Ok((0..n)
                    .map(|_| {
                        Action::Continuous(
                            mean.iter()
                                .zip(&std)
                                .map(|(m, sd)| {
                                    let e: f64 = StandardNormal.sample(rng);
                                    m + sd * e
                                })
                                .collect(),
                        )
                    })
                    .collect())
            }
        }
    }
}
