//! BR-RCRL training: the action loss `L0`, the RTG likelihood `L1`, their
//! combination `L0 + lambda * L1`, and a minibatch first-order optimizer.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Mat, Tape, Var};
use crate::dataset::{Action, Dataset, Obs};
use crate::error::{Error, Result};
use crate::model::factored::PriorOut;
use crate::model::{ActionInput, Batch, BayesModel, FactoredModel, JointModel, PriorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_iterations: usize,
    pub n_negatives: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: 1e-3,
            batch_size: 256,
            n_iterations: 20_000,
            n_negatives: 64,
            seed: 0,
            optimizer: Optimizer::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.n_negatives == 0 {
            return Err(Error::InvalidConfig("n_negatives must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l0: f64,
    pub l1: f64,
    pub total: f64,
}

pub type LossCurve = Vec<LossRecord>;

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Runs `cfg.n_iterations` minibatch steps on `params`. The closure builds
/// `(L0, Some(L1))` for the given batch rows; the step minimizes
/// `L0 + lambda * L1`. Batch rows come from RNG stream 0 and anything the
/// closure samples from stream 1, both seeded by `cfg.seed`.
pub fn optimize(
    params: &mut [f64],
    cfg: &TrainConfig,
    n_rows: usize,
    mut losses: impl FnMut(&Tape, Var, &[usize], &mut ChaCha8Rng) -> (Var, Option<Var>),
) -> Result<LossCurve> {
    cfg.validate()?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aux_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aux_rng.set_stream(1);
    let mut adam = AdamState {
        m: vec![0.0; params.len()],
        v: vec![0.0; params.len()],
        t: 0,
    };
    let mut curve = Vec::with_capacity(cfg.n_iterations);
    for iteration in 0..cfg.n_iterations {
        let rows: Vec<usize> = (0..cfg.batch_size).map(|_| batch_rng.random_range(0..n_rows)).collect();
        let tape = Tape::new();
        let theta = tape.leaf(Mat::row_vector(params.to_vec()));
        let (l0, l1) = losses(&tape, theta, &rows, &mut aux_rng);
        let total = match l1 {
            Some(l1) => tape.add(l0, tape.scale(l1, cfg.lambda)),
            None => l0,
        };
        let rec = LossRecord {
            iteration,
            l0: tape.scalar(l0),
            l1: l1.map_or(0.0, |v| tape.scalar(v)),
            total: tape.scalar(total),
        };
        if !(rec.l0.is_finite() && rec.l1.is_finite() && rec.total.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration, batch: rows });
        }
        let g = tape.gradient(total, theta).data;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration, batch: rows });
        }
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, gk) in params.iter_mut().zip(&g) {
                    *p -= cfg.learning_rate * gk;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                adam.t += 1;
                let c1 = 1.0 - beta1.powi(adam.t);
                let c2 = 1.0 - beta2.powi(adam.t);
                for k in 0..params.len() {
                    adam.m[k] = beta1 * adam.m[k] + (1.0 - beta1) * g[k];
                    adam.v[k] = beta2 * adam.v[k] + (1.0 - beta2) * g[k] * g[k];
                    params[k] -= cfg.learning_rate * (adam.m[k] / c1) / ((adam.v[k] / c2).sqrt() + eps);
                }
            }
        }
        curve.push(rec);
    }
    Ok(curve)
}

/// Fixed negative actions for the contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub enum Negatives {
    /// `k` prior samples per row, stored row-major (`i * k + j`).
    Sampled { actions: ActionInput, k: usize },
    /// Every action of a categorical prior, weighted by its prior probability.
    Exhaustive,
}

/// Models trainable with the BR objective.
pub trait BrModel: BayesModel + Clone {
    fn params(&self) -> &[f64];

    fn set_params(&mut self, params: Vec<f64>) -> Result<()>;

    fn encode_batch(&self, states: &[Obs], actions: &[Action], rtg: &[f64]) -> Result<Batch>;

    /// Negatives for one batch; `None` when `L0` needs none.
    fn negatives(&self, batch: &Batch, n: usize, rng: &mut dyn RngCore) -> Result<Option<Negatives>>;

    /// `(L0, L1)` on the tape, both batch means.
    fn loss_terms(&self, tape: &Tape, theta: Var, batch: &Batch, negatives: Option<&Negatives>) -> (Var, Var);
}

impl BrModel for JointModel {
    fn params(&self) -> &[f64] {
        JointModel::params(self)
    }

    fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        JointModel::set_params(self, params)
    }

    fn encode_batch(&self, states: &[Obs], actions: &[Action], rtg: &[f64]) -> Result<Batch> {
        JointModel::encode_batch(self, states, actions, rtg)
    }

    fn negatives(&self, _: &Batch, _: usize, _: &mut dyn RngCore) -> Result<Option<Negatives>> {
        Ok(None)
    }

    fn loss_terms(&self, tape: &Tape, theta: Var, batch: &Batch, _: Option<&Negatives>) -> (Var, Var) {
        let l0 = tape.neg(tape.mean(self.log_conditional(tape, theta, batch)));
        let l1 = tape.neg(tape.mean(self.log_rtg(tape, theta, batch)));
        (l0, l1)
    }
}

impl BrModel for FactoredModel {
    fn params(&self) -> &[f64] {
        FactoredModel::params(self)
    }

    fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        FactoredModel::set_params(self, params)
    }

    fn encode_batch(&self, states: &[Obs], actions: &[Action], rtg: &[f64]) -> Result<Batch> {
        FactoredModel::encode_batch(self, states, actions, rtg)
    }

    fn negatives(&self, batch: &Batch, n: usize, rng: &mut dyn RngCore) -> Result<Option<Negatives>> {
        sample_negatives(self, batch, n, rng).map(Some)
    }

    fn loss_terms(&self, tape: &Tape, theta: Var, batch: &Batch, negatives: Option<&Negatives>) -> (Var, Var) {
        let negatives = negatives.expect("the contrastive loss needs negatives");
        factored_terms(self, tape, theta, batch, negatives)
    }
}

/// Draws `n` actions per batch row from the current prior. Sampling happens
/// outside the tape, so no gradient flows through it.
pub fn sample_negatives(model: &FactoredModel, batch: &Batch, n: usize, rng: &mut dyn RngCore) -> Result<Negatives> {
    if n == 0 {
        return Err(Error::InvalidConfig("n_negatives must be at least 1".into()));
    }
    let tape = Tape::new();
    let theta = tape.leaf(Mat::row_vector(model.params().to_vec()));
    let phi = model.features(&tape, theta, &batch.states);
    let actions = match model.prior(&tape, theta, phi) {
        PriorOut::Gaussian { mean, log_std } => {
            let (mean, ls) = (tape.value(mean), tape.value(log_std));
            let d = mean.cols;
            let mut data = Vec::with_capacity(batch.len() * n * d);
            for i in 0..batch.len() {
                for _ in 0..n {
                    for k in 0..d {
                        let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                        data.push(mean.get(i, k) + ls.get(i, k).exp() * e);
                    }
                }
            }
            ActionInput::Dense(Mat::new(batch.len() * n, d, data))
        }
        PriorOut::Categorical { log_probs } => {
            let lp = tape.value(log_probs);
            let mut idx = Vec::with_capacity(batch.len() * n);
            for i in 0..batch.len() {
                let p: Vec<f64> = lp.row(i).iter().map(|x| x.exp()).collect();
                idx.extend((0..n).map(|_| crate::util::sample_index(&p, rng)));
            }
            ActionInput::Indices(idx)
        }
    };
    Ok(Negatives::Sampled { actions, k: n })
}

/// Per-row `(log beta(a_i | s_i), contrastive term, log beta(R_i | s_i, a_i))`.
fn factored_rows(model: &FactoredModel, tape: &Tape, theta: Var, batch: &Batch, negatives: &Negatives) -> (Var, Var, Var) {
    let n = batch.len();
    let phi = model.features(tape, theta, &batch.states);
    let prior = model.prior(tape, theta, phi);
    let log_prior = model.log_prior_on(tape, &prior, &batch.actions);
    let pos_actions = tape.constant(model.action_matrix(&batch.actions));
    let pos = tape.pick(model.rtg_log_probs(tape, theta, phi, pos_actions), batch.buckets.clone());

    let log_denominator = match negatives {
        Negatives::Sampled { actions, k } => {
            let k = *k;
            let rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
            let phi_rep = tape.gather_rows(phi, rows.clone());
            let a = tape.constant(model.action_matrix(actions));
            let labels = rows.iter().map(|&i| batch.buckets[i]).collect();
            let neg = tape.reshape(tape.pick(model.rtg_log_probs(tape, theta, phi_rep, a), labels), n, k);
            // The positive sits in its own denominator.
            tape.log_sum_exp_rows(tape.concat_cols(pos, neg))
        }
        Negatives::Exhaustive => {
            let PriorOut::Categorical { log_probs } = prior else {
                panic!("exhaustive negatives need a categorical prior");
            };
            let PriorSpec::Categorical { n_actions } = model.config().prior else {
                unreachable!()
            };
            let rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, n_actions)).collect();
            let phi_rep = tape.gather_rows(phi, rows.clone());
            let all: Vec<usize> = (0..n).flat_map(|_| 0..n_actions).collect();
            let a = tape.constant(crate::model::one_hot(&all, n_actions));
            let labels = rows.iter().map(|&i| batch.buckets[i]).collect();
            let head = tape.reshape(tape.pick(model.rtg_log_probs(tape, theta, phi_rep, a), labels), n, n_actions);
            // Weighted by the prior: log sum_a' beta(a'|s) beta(R|s,a').
            tape.log_sum_exp_rows(tape.add(log_probs, head))
        }
    };
    (log_prior, tape.sub(pos, log_denominator), pos)
}

fn factored_terms(model: &FactoredModel, tape: &Tape, theta: Var, batch: &Batch, negatives: &Negatives) -> (Var, Var) {
    let (log_prior, contrastive, pos) = factored_rows(model, tape, theta, batch, negatives);
    let l0 = tape.neg(tape.mean(tape.add(log_prior, contrastive)));
    let l1 = tape.neg(tape.mean(pos));
    (l0, l1)
}

fn eval_terms<M: BrModel>(model: &M, batch: &Batch, negatives: Option<&Negatives>, lambda: f64) -> (f64, f64, f64) {
    let tape = Tape::new();
    let theta = tape.leaf(Mat::row_vector(model.params().to_vec()));
    let (l0, l1) = model.loss_terms(&tape, theta, batch, negatives);
    let (a, b) = (tape.scalar(l0), tape.scalar(l1));
    (a, b, a + lambda * b)
}

/// `-mean log beta(R_i | s_i, a_i)`.
pub fn loss_l1<M: BrModel>(model: &M, batch: &Batch, negatives: Option<&Negatives>) -> f64 {
    eval_terms(model, batch, negatives, 0.0).1
}

/// `-mean log beta(a_i | s_i, R_i)` from the joint softmax.
pub fn loss_l0_discrete(model: &JointModel, batch: &Batch) -> f64 {
    eval_terms(model, batch, None, 0.0).0
}

/// The contrastive `L0` with the given negatives.
pub fn loss_l0_infonce(model: &FactoredModel, batch: &Batch, negatives: &Negatives) -> f64 {
    eval_terms(model, batch, Some(negatives), 0.0).0
}

/// The contrastive term alone, per sample.
pub fn contrastive_terms(model: &FactoredModel, batch: &Batch, negatives: &Negatives) -> Vec<f64> {
    let tape = Tape::new();
    let theta = tape.leaf(Mat::row_vector(model.params().to_vec()));
    let (_, contrastive, _) = factored_rows(model, &tape, theta, batch, negatives);
    tape.value(contrastive).data
}

/// `L0 + lambda * L1`.
pub fn total_loss<M: BrModel>(model: &M, batch: &Batch, negatives: Option<&Negatives>, lambda: f64) -> f64 {
    eval_terms(model, batch, negatives, lambda).2
}

/// Gradient of `L0 + lambda * L1` with respect to the flat parameters.
pub fn total_loss_grad<M: BrModel>(model: &M, batch: &Batch, negatives: Option<&Negatives>, lambda: f64) -> (f64, Vec<f64>) {
    grad(model.params(), |tape, theta| {
        let (l0, l1) = model.loss_terms(tape, theta, batch, negatives);
        tape.add(l0, tape.scale(l1, lambda))
    })
}

pub fn encode_dataset<M: BrModel>(model: &M, dataset: &Dataset) -> Result<Batch> {
    let states: Vec<Obs> = dataset.transitions().iter().map(|t| t.state.clone()).collect();
    let actions: Vec<Action> = dataset.transitions().iter().map(|t| t.action.clone()).collect();
    model.encode_batch(&states, &actions, dataset.rtg())
}

/// Minibatch training of a BR model. Deterministic given `cfg.seed`.
pub fn train<M: BrModel>(model: &M, dataset: &Dataset, cfg: &TrainConfig) -> Result<(M, LossCurve)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("cannot train on an empty dataset".into()));
    }
    let data = encode_dataset(model, dataset)?;
    let mut params = model.params().to_vec();
    let mut current = model.clone();
    let mut failure = None;
    let curve = optimize(&mut params, cfg, data.len(), |tape, theta, rows, rng| {
        let batch = data.select(rows);
        // Negatives come from the prior at the current parameters.
        current
            .set_params(tape.value(theta).data)
            .expect("parameter length is fixed");
        let negs = match current.negatives(&batch, cfg.n_negatives, rng) {
            Ok(n) => n,
            Err(e) => {
                failure.get_or_insert(e);
                None
            }
        };
        let (l0, l1) = current.loss_terms(tape, theta, &batch, negs.as_ref());
        (l0, Some(l1))
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let curve = curve?;
    let mut out = model.clone();
    out.set_params(params)?;
    Ok((out, curve))
}

/// Monte Carlo estimate of `Z(s, R) = E_{a ~ beta(.|s)} beta(R | s, a)`.
pub fn estimate_normalizer<M: BayesModel + ?Sized>(
    model: &M,
    s: &Obs,
    bucket: usize,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    let actions = model.sample_prior(s, n_samples, rng)?;
    let rows = model.rtg_probs(s, &actions)?;
    Ok(rows.iter().map(|r| r[bucket]).sum::<f64>() / n_samples as f64)
}

/// Trailing moving average of the total loss.
pub fn moving_average(curve: &[LossRecord], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(curve.len());
    let mut acc = 0.0;
    for (i, r) in curve.iter().enumerate() {
        acc += r.total;
        if i >= window {
            acc -= curve[i - window].total;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}
