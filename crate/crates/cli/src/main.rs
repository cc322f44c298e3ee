use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rcrl_core::envs::{generate_dataset, make_env};
use rcrl_core::harness::plot::emit_plots;
use rcrl_core::harness::{
    episode_table, evaluate_checkpoint, loss_table, run_delta_sweep, run_portion_study, run_strategy_comparison,
    theorem_table, trace_table, train_checkpoint, Table,
};
use rcrl_core::oracle::{theorem2_suite, SUITE_DELTAS};
use rcrl_core::{Checkpoint, Dataset, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rcrl", version, about = "Reward-conditioned offline RL on tabular environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a behavior policy and write the transitions as JSON lines.
    GenData {
        #[arg(long)]
        env: String,
        #[arg(long, default_value = "default")]
        policy: String,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset and write a checkpoint plus its loss curve.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// `br`, `br-factored`, `vanilla` or `bc`; defaults to the config's model.
        #[arg(long)]
        model: Option<String>,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint path with a `.loss.csv` extension.
        #[arg(long)]
        loss_out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write per-episode metrics.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        force: ForceArgs,
        #[arg(long)]
        out: PathBuf,
        /// Per-step trace with target and observed RTG.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Adaptive return over the configured delta grid and seeds.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train vanilla and BR on top-return subsets of the data.
    PortionStudy {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare adaptive, max and dt-scheduler inference.
    StrategyCompare {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        force: ForceArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the KL and value bounds of the adaptive policy on random MDPs.
    OracleCheck {
        #[arg(long, default_value = "theorem2")]
        suite: String,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render experiment CSVs as SVG files.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Flat TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Args)]
struct ForceArgs {
    /// Step at which the action is overridden.
    #[arg(long, requires = "force_action")]
    force_t: Option<usize>,
    #[arg(long, requires = "force_t")]
    force_action: Option<usize>,
}

impl ForceArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if self.force_t.is_some() {
            cfg.force_t = self.force_t;
            cfg.force_action = self.force_action;
        }
    }
}

fn save(table: &Table, path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    table
        .save(path, &cfg.hash())
        .with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {} ({} rows)", path.display(), table.len());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            env,
            policy,
            episodes,
            seed,
            out,
        } => {
            let spec = make_env(&env)?;
            let beta = spec.policy(&policy)?;
            let ds = generate_dataset(&spec.mdp, &beta, episodes, seed)?;
            ds.save_jsonl(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} ({} transitions, {} episodes)", out.display(), ds.len(), ds.n_episodes());
        }
        Command::Train {
            data,
            config,
            model,
            seed,
            out,
            loss_out,
        } => {
            let mut cfg = config.load()?;
            if let Some(m) = model {
                cfg.model = m;
            }
            cfg.validate()?;
            let env = cfg.env_spec()?;
            let ds = Dataset::load_jsonl(&data, env.mdp.discount())
                .with_context(|| format!("loading dataset {}", data.display()))?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let (ckpt, curve) = train_checkpoint(cfg.model_choice()?, &env, &ds, &cfg, seed)?;
            ckpt.save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {}", out.display());
            let loss_out = loss_out.unwrap_or_else(|| out.with_extension("loss.csv"));
            save(&loss_table(&curve), &loss_out, &cfg)?;
        }
        Command::Eval {
            ckpt,
            config,
            env,
            strategy,
            delta,
            episodes,
            seed,
            force,
            out,
            trace,
        } => {
            let mut cfg = config.load()?;
            cfg.env = env.unwrap_or(cfg.env);
            cfg.strategy = strategy.unwrap_or(cfg.strategy);
            cfg.delta = delta.unwrap_or(cfg.delta);
            cfg.eval_episodes = episodes.unwrap_or(cfg.eval_episodes);
            cfg.seeds = vec![seed];
            force.apply(&mut cfg);
            cfg.validate()?;
            let ckpt = load_checkpoint(&ckpt)?;
            let env = cfg.env_spec()?;
            let hook = cfg.forced_move();
            let trs = evaluate_checkpoint(&ckpt, &env, &cfg, cfg.strategy_choice()?, cfg.delta, seed, hook.as_ref())?;
            save(&episode_table(&trs), &out, &cfg)?;
            if let Some(trace) = trace {
                save(&trace_table(&trs), &trace, &cfg)?;
            }
            let mean = trs.iter().map(|t| t.total_return()).sum::<f64>() / trs.len().max(1) as f64;
            println!("mean return {mean:.4} over {} episodes", trs.len());
        }
        Command::Sweep { ckpt, config, out } => {
            let cfg = config.load()?;
            let ckpt = load_checkpoint(&ckpt)?;
            save(&run_delta_sweep(&cfg, &ckpt)?, &out, &cfg)?;
        }
        Command::PortionStudy { config, out } => {
            let cfg = config.load()?;
            save(&run_portion_study(&cfg)?, &out, &cfg)?;
        }
        Command::StrategyCompare {
            ckpt,
            config,
            force,
            out,
        } => {
            let mut cfg = config.load()?;
            force.apply(&mut cfg);
            cfg.validate()?;
            let ckpt = load_checkpoint(&ckpt)?;
            save(&run_strategy_comparison(&cfg, &ckpt)?, &out, &cfg)?;
        }
        Command::OracleCheck {
            suite,
            instances,
            seed,
            deltas,
            out,
        } => {
            if suite != "theorem2" {
                bail!("unknown suite `{suite}` (expected `theorem2`)");
            }
            let deltas = deltas.unwrap_or_else(|| SUITE_DELTAS.to_vec());
            if let Some(d) = deltas.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
                bail!("delta must lie in (0,1), got {d}");
            }
            let cells = theorem2_suite(instances, seed, &deltas)?;
            if let Some(out) = out {
                let mut cfg = ExperimentConfig {
                    name: format!("oracle-check:{suite}:{instances}"),
                    ..ExperimentConfig::default()
                };
                cfg.seeds = vec![seed];
                cfg.deltas = deltas.clone();
                save(&theorem_table(&cells), &out, &cfg)?;
            }
            let mut violated = false;
            for c in cells.iter().filter(|c| !(c.kl_holds() && c.value_holds())) {
                violated = true;
                println!(
                    "VIOLATION mdp_seed={} delta={} kl={:.6} bound={:.6} min_value_gap={:.3e} at t={} s={}",
                    c.instance_seed, c.delta, c.kl, c.kl_bound, c.min_value_gap, c.worst_step, c.worst_state
                );
            }
            println!(
                "{} instances x {} deltas checked: {}",
                instances,
                deltas.len(),
                if violated { "violations found" } else { "all bounds hold" }
            );
            if violated {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Plot { csv, out_dir } => {
            for p in emit_plots(&csv, &out_dir)? {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
