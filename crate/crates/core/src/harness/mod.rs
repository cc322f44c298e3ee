//! Experiment configuration and the scripted studies behind the CLI.
//!
//! Every study is a pure function of its [`ExperimentConfig`]: data,
//! training and evaluation draw from seeds in the config, and CSV rows are
//! assembled in a fixed cell order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{train_bc, train_vanilla, PolicyHead, VanillaConfig, VanillaModel};
use crate::dataset::Dataset;
use crate::envs::{force_action, generate_dataset, make_env, ActionHook, EnvSpec, ForceAction, NoHook};
use crate::error::{Error, Result};
use crate::inference::{evaluate, BrAgent, DfoConfig, InferenceConfig, Strategy, Trajectory, VanillaAgent};
use crate::model::checkpoint::LoadedModel;
use crate::model::{
    BayesModel, Checkpoint, FactoredConfig, FactoredModel, FeatureSpec, Init, JointConfig, JointModel, ModelKind,
    PriorSpec,
};
use crate::oracle::TheoremCell;
use crate::training::{train, LossCurve, Optimizer, TrainConfig};
use crate::util::mean_std;

pub mod plot;
pub mod table;

pub use table::{num, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// Joint softmax over actions and RTG buckets.
    Br,
    /// Categorical prior and RTG head trained with the contrastive loss.
    BrFactored,
    Vanilla,
    Bc,
}

impl ModelChoice {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "br" => Ok(ModelChoice::Br),
            "br-factored" | "br_factored" => Ok(ModelChoice::BrFactored),
            "vanilla" => Ok(ModelChoice::Vanilla),
            "bc" => Ok(ModelChoice::Bc),
            _ => Err(Error::UnknownName {
                kind: "model",
                name: name.into(),
            }),
        }
    }
}

/// A flat key-value experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: String,
    /// `default`, `uniform` or `eps-greedy:<eps>`.
    pub behavior: String,
    pub data_episodes: usize,
    pub data_seed: u64,
    pub model: String,
    /// RTG head width of the factored model.
    pub head_width: usize,
    /// Hidden width of the vanilla model; 0 is linear.
    pub hidden_width: usize,

    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_iterations: usize,
    pub n_negatives: usize,

    pub strategy: String,
    pub delta: f64,
    pub deltas: Vec<f64>,
    pub eps_eval: f64,
    pub n_action_samples: usize,
    pub ood_mass: f64,
    pub dfo_n_iters: usize,
    pub dfo_n_samples: usize,
    pub dfo_shrink: f64,
    pub dfo_noise_scale: f64,

    /// Training and evaluation seeds.
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub max_steps: Option<usize>,
    pub force_t: Option<usize>,
    pub force_action: Option<usize>,
    pub fractions: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let inference = InferenceConfig::default();
        Self {
            name: "experiment".into(),
            env: "stairs".into(),
            behavior: "default".into(),
            data_episodes: 2000,
            data_seed: 0,
            model: "br".into(),
            head_width: 16,
            hidden_width: 0,
            lambda: train.lambda,
            learning_rate: 0.05,
            batch_size: train.batch_size,
            n_iterations: 1000,
            n_negatives: train.n_negatives,
            strategy: "adaptive".into(),
            delta: inference.delta,
            deltas: vec![0.1, 0.5, 0.9],
            eps_eval: inference.eps_eval,
            n_action_samples: inference.n_action_samples,
            ood_mass: inference.ood_mass,
            dfo_n_iters: inference.dfo.n_iters,
            dfo_n_samples: inference.dfo.n_samples,
            dfo_shrink: inference.dfo.shrink,
            dfo_noise_scale: inference.dfo.noise_scale,
            seeds: (0..5).collect(),
            eval_episodes: 20,
            max_steps: None,
            force_t: None,
            force_action: None,
            fractions: vec![1.0, 0.5, 0.2],
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let env = make_env(&self.env)?;
        env.policy(&self.behavior)?;
        ModelChoice::parse(&self.model)?;
        Strategy::parse(&self.strategy)?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        if self.data_episodes == 0 {
            return Err(Error::InvalidConfig("data_episodes must be at least 1".into()));
        }
        for &d in self.deltas.iter().chain([&self.delta]) {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::InvalidConfig(format!("delta must lie in (0,1), got {d}")));
            }
        }
        if let Some(&f) = self.fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::InvalidConfig(format!("fraction must lie in (0,1], got {f}")));
        }
        if self.force_t.is_some() != self.force_action.is_some() {
            return Err(Error::InvalidConfig("force_t and force_action go together".into()));
        }
        if let Some(a) = self.force_action.filter(|&a| a >= env.mdp.n_actions()) {
            return Err(Error::OutOfRange {
                index: a,
                len: env.mdp.n_actions(),
            });
        }
        self.train_config(0).validate()?;
        self.inference_config(Strategy::Adaptive, self.delta).validate()
    }

    /// SHA-256 of the config's canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        make_env(&self.env)
    }

    pub fn model_choice(&self) -> Result<ModelChoice> {
        ModelChoice::parse(&self.model)
    }

    pub fn strategy_choice(&self) -> Result<Strategy> {
        Strategy::parse(&self.strategy)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            n_iterations: self.n_iterations,
            n_negatives: self.n_negatives,
            seed,
            optimizer: Optimizer::default(),
        }
    }

    pub fn inference_config(&self, strategy: Strategy, delta: f64) -> InferenceConfig {
        InferenceConfig {
            delta,
            n_action_samples: self.n_action_samples,
            strategy,
            eps_eval: self.eps_eval,
            dfo: DfoConfig {
                n_iters: self.dfo_n_iters,
                n_samples: self.dfo_n_samples,
                shrink: self.dfo_shrink,
                noise_scale: self.dfo_noise_scale,
                ..DfoConfig::default()
            },
            ood_mass: self.ood_mass,
        }
    }

    pub fn forced_move(&self) -> Option<ForceAction> {
        Some(force_action(self.force_t?, self.force_action?))
    }

    pub fn dataset(&self) -> Result<(EnvSpec, Dataset)> {
        let env = self.env_spec()?;
        let beta = env.policy(&self.behavior)?;
        let ds = generate_dataset(&env.mdp, &beta, self.data_episodes, self.data_seed)?;
        Ok((env, ds))
    }

    fn max_steps(&self) -> usize {
        self.max_steps.unwrap_or(usize::MAX)
    }
}

/// The model configuration `choice` uses on a tabular environment.
pub fn model_kind(choice: ModelChoice, env: &EnvSpec, cfg: &ExperimentConfig) -> ModelKind {
    let features = FeatureSpec::OneHot {
        n_states: env.mdp.n_states(),
    };
    let n_actions = env.mdp.n_actions();
    let vanilla = |use_rtg| VanillaConfig {
        features,
        head: PolicyHead::Discrete { n_actions },
        buckets: env.buckets,
        hidden_width: cfg.hidden_width,
        use_rtg,
    };
    match choice {
        ModelChoice::Br => ModelKind::Br(JointConfig {
            features,
            n_actions,
            buckets: env.buckets,
        }),
        ModelChoice::BrFactored => ModelKind::BrFactored(FactoredConfig {
            features,
            prior: PriorSpec::Categorical { n_actions },
            buckets: env.buckets,
            head_width: cfg.head_width,
        }),
        ModelChoice::Vanilla => ModelKind::Vanilla(vanilla(true)),
        ModelChoice::Bc => ModelKind::Bc(vanilla(false)),
    }
}

/// Trains `choice` on `dataset` with training seed `seed`.
pub fn train_checkpoint(
    choice: ModelChoice,
    env: &EnvSpec,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Checkpoint, LossCurve)> {
    let kind = model_kind(choice, env, cfg);
    let tc = cfg.train_config(seed);
    let (params, curve) = match &kind {
        ModelKind::Br(c) => {
            let (m, curve) = train(&JointModel::new(*c, Init::Default, seed)?, dataset, &tc)?;
            (m.params().to_vec(), curve)
        }
        ModelKind::BrFactored(c) => {
            let (m, curve) = train(&FactoredModel::new(*c, Init::Default, seed)?, dataset, &tc)?;
            (m.params().to_vec(), curve)
        }
        ModelKind::Vanilla(c) => {
            let (m, curve) = train_vanilla(&VanillaModel::new(*c, Init::Default, seed)?, dataset, &tc)?;
            (m.params().to_vec(), curve)
        }
        ModelKind::Bc(c) => {
            let (m, curve) = train_bc(&VanillaModel::new(*c, Init::Default, seed)?, dataset, &tc)?;
            (m.params().to_vec(), curve)
        }
    };
    let max_rtg = dataset
        .max_episode_rtg()
        .ok_or_else(|| Error::InvalidDataset("dataset has no episodes".into()))?;
    Ok((Checkpoint::new(kind, dataset.gamma(), max_rtg, params), curve))
}

/// Rolls out `cfg.eval_episodes` episodes of a checkpointed model.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    env: &EnvSpec,
    cfg: &ExperimentConfig,
    strategy: Strategy,
    delta: f64,
    seed: u64,
    hook: Option<&ForceAction>,
) -> Result<Vec<Trajectory>> {
    let hook: &dyn ActionHook = match hook {
        Some(h) => h,
        None => &NoHook,
    };
    let icfg = cfg.inference_config(strategy, delta);
    let (n, steps, target, gamma) = (cfg.eval_episodes, cfg.max_steps(), ckpt.max_dataset_rtg, ckpt.gamma);
    let br = |m: &dyn BayesModel| evaluate(&env.mdp, || BrAgent::new(m, icfg.clone(), target, gamma), n, steps, seed, hook);
    let vanilla = |m: &VanillaModel| {
        evaluate(
            &env.mdp,
            || VanillaAgent::new(m, strategy, icfg.eps_eval, target, gamma),
            n,
            steps,
            seed,
            hook,
        )
    };
    match ckpt.restore()? {
        LoadedModel::Br(m) => br(&m),
        LoadedModel::BrFactored(m) => br(&m),
        LoadedModel::Vanilla(m) | LoadedModel::Bc(m) => vanilla(&m),
    }
}

fn mean_return(trajectories: &[Trajectory]) -> (f64, f64) {
    mean_std(&trajectories.iter().map(Trajectory::total_return).collect::<Vec<_>>())
}

/// One row per optimizer step.
pub fn loss_table(curve: &LossCurve) -> Table {
    let mut t = Table::new(&["iteration", "l0", "l1", "total"]);
    for r in curve {
        t.push(vec![r.iteration.to_string(), num(r.l0), num(r.l1), num(r.total)]);
    }
    t
}

/// One row per (instance, delta) cell of a theorem suite.
pub fn theorem_table(cells: &[TheoremCell]) -> Table {
    let mut t = Table::new(&[
        "instance_seed",
        "delta",
        "horizon",
        "kl",
        "kl_bound",
        "kl_holds",
        "min_value_gap",
        "value_holds",
        "worst_step",
        "worst_state",
    ]);
    for c in cells {
        t.push(vec![
            c.instance_seed.to_string(),
            num(c.delta),
            c.horizon.to_string(),
            num(c.kl),
            num(c.kl_bound),
            u8::from(c.kl_holds()).to_string(),
            num(c.min_value_gap),
            u8::from(c.value_holds()).to_string(),
            c.worst_step.to_string(),
            c.worst_state.to_string(),
        ]);
    }
    t
}

/// Per-episode metrics of one evaluation.
pub fn episode_table(trajectories: &[Trajectory]) -> Table {
    let mut t = Table::new(&["episode", "return", "length", "ood_events"]);
    for (i, tr) in trajectories.iter().enumerate() {
        t.push(vec![
            i.to_string(),
            num(tr.total_return()),
            tr.len().to_string(),
            tr.ood_events().to_string(),
        ]);
    }
    t
}

/// Per-step trace: target and observed RTG at every step of every episode.
pub fn trace_table(trajectories: &[Trajectory]) -> Table {
    let mut t = Table::new(&[
        "episode",
        "t",
        "state",
        "action",
        "reward",
        "target_rtg",
        "observed_rtg",
        "ood_event",
    ]);
    for (i, tr) in trajectories.iter().enumerate() {
        for s in &tr.steps {
            t.push(vec![
                i.to_string(),
                s.t.to_string(),
                s.state.to_string(),
                s.action.to_string(),
                num(s.reward),
                num(s.target_rtg),
                num(s.observed_rtg),
                u8::from(s.ood_event).to_string(),
            ]);
        }
    }
    t
}

/// Adaptive returns over `cfg.deltas` x `cfg.seeds`.
pub fn run_delta_sweep(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<Table> {
    cfg.validate()?;
    let env = cfg.env_spec()?;
    let hook = cfg.forced_move();
    let mut t = Table::new(&["delta", "seed", "mean_return", "std_return"]);
    for &delta in &cfg.deltas {
        for &seed in &cfg.seeds {
            let trs = evaluate_checkpoint(ckpt, &env, cfg, Strategy::Adaptive, delta, seed, hook.as_ref())?;
            let (m, s) = mean_return(&trs);
            t.push(vec![num(delta), seed.to_string(), num(m), num(s)]);
        }
    }
    Ok(t)
}

/// Per-step target and observed RTG under `cfg.strategy` at `cfg.delta`,
/// one block of episodes per seed.
pub fn run_target_observed(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<Table> {
    cfg.validate()?;
    let env = cfg.env_spec()?;
    let hook = cfg.forced_move();
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        all.extend(evaluate_checkpoint(ckpt, &env, cfg, cfg.strategy_choice()?, cfg.delta, seed, hook.as_ref())?);
    }
    Ok(trace_table(&all))
}

/// Trains vanilla and BR on the top `fraction` of episodes for every
/// fraction and seed. BR is evaluated adaptively at `cfg.delta`; vanilla is
/// conditioned on the best return in its filtered data.
pub fn run_portion_study(cfg: &ExperimentConfig) -> Result<Table> {
    cfg.validate()?;
    let (env, full) = cfg.dataset()?;
    let mut t = Table::new(&["model", "fraction", "seed", "score"]);
    for (name, choice, strategy) in [
        ("vanilla", ModelChoice::Vanilla, Strategy::Max),
        ("br", ModelChoice::Br, Strategy::Adaptive),
    ] {
        for &fraction in &cfg.fractions {
            let ds = full.filter_top_fraction(fraction)?;
            for &seed in &cfg.seeds {
                let (ckpt, _) = train_checkpoint(choice, &env, &ds, cfg, seed)?;
                let trs = evaluate_checkpoint(&ckpt, &env, cfg, strategy, cfg.delta, seed, None)?;
                t.push(vec![name.into(), num(fraction), seed.to_string(), num(mean_return(&trs).0)]);
            }
        }
    }
    Ok(t)
}

/// All strategies a checkpoint supports, without and (if configured) with
/// the forced move.
pub fn run_strategy_comparison(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<Table> {
    cfg.validate()?;
    let env = cfg.env_spec()?;
    let strategies: Vec<Strategy> = match ckpt.model {
        ModelKind::Vanilla(_) | ModelKind::Bc(_) => vec![Strategy::Max, Strategy::DtScheduler],
        _ => Strategy::ALL.to_vec(),
    };
    let forced = cfg.forced_move();
    let mut hooks = vec![None];
    if forced.is_some() {
        hooks.push(forced);
    }
    let mut t = Table::new(&[
        "strategy",
        "forced",
        "seed",
        "score",
        "ood_event_count",
        "episodes_with_ood",
        "episodes_positive",
        "episodes",
    ]);
    for hook in &hooks {
        for &strategy in &strategies {
            for &seed in &cfg.seeds {
                let trs = evaluate_checkpoint(ckpt, &env, cfg, strategy, cfg.delta, seed, hook.as_ref())?;
                t.push(vec![
                    strategy.name().into(),
                    u8::from(hook.is_some()).to_string(),
                    seed.to_string(),
                    num(mean_return(&trs).0),
                    trs.iter().map(Trajectory::ood_events).sum::<usize>().to_string(),
                    trs.iter().filter(|tr| tr.ood_events() > 0).count().to_string(),
                    trs.iter().filter(|tr| tr.total_return() > 0.0).count().to_string(),
                    trs.len().to_string(),
                ]);
            }
        }
    }
    Ok(t)
}
