//! Reward-conditioned offline RL with a Bayes-rule reparameterization.
//!
//! A policy conditioned on a return `R` is written as
//! `beta(a | s, R) = beta(a | s) beta(R | s, a) / Z(s, R)`, learned from
//! offline data, and queried at test time through the event `R >= theta`
//! for a state-dependent threshold `theta`. Exact dynamic-programming
//! oracles on small tabular MDPs check the learned quantities.

#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod baselines;
pub mod bucket;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod harness;
pub mod inference;
pub mod mdp;
pub mod model;
pub mod oracle;
pub mod training;
pub mod util;

pub use baselines::{PolicyHead, VanillaConfig, VanillaModel};
pub use bucket::BucketSpec;
pub use dataset::{Action, Dataset, Obs, Transition};
pub use envs::EnvSpec;
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ModelChoice};
pub use inference::{DfoConfig, InferenceConfig, Strategy, Trajectory};
pub use mdp::{Mdp, MdpBuilder};
pub use model::{BayesModel, Checkpoint, FactoredConfig, FactoredModel, JointConfig, JointModel, ModelKind};
pub use oracle::{ExactRtgDistribution, ReturnLaw, TimePolicy};
pub use training::{LossCurve, TrainConfig};
