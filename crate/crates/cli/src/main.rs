//! `wam4d` command-line entry point.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wam4d::codec::fit_normalizer;
use wam4d::diffusion::sample_ans;
use wam4d::eval::{ablation_table, AblationEval, eval_seeds, format_table, policy_success, recon_4d, Policy, ReconMode};
use wam4d::trainer::{train_run, Checkpoint};
use wam4d::worldsim::{generate_dataset, load_dataset};

use config::{RunConfig, KEYS};

const DATA_ENV: &str = "WAM4D_DATA";

#[derive(Parser)]
#[command(name = "wam4d", version, about = "Unified 4D world-action model at desk scale")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value configuration file (see `wam4d keys`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    ActionConditioned,
    Joint,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert episodes into a dataset directory.
    GenData {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long, env = DATA_ENV, default_value = "data")]
        out: PathBuf,
    },
    /// Train a model; writes metrics.jsonl and checkpoints into --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (overrides train.dataset).
        #[arg(long, env = DATA_ENV)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from this checkpoint with its stored configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Closed-loop success of a checkpoint (or the scripted expert).
    Rollout {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        /// Drive the arm with the scripted expert instead.
        #[arg(long)]
        expert: bool,
    },
    /// 4D reconstruction metrics of a checkpoint on held-out episodes.
    #[command(name = "eval-4d")]
    Eval4d {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
    },
    /// Train the three noise regimes and print the four-row comparison.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, env = DATA_ENV)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        /// Action steps of the asynchronous rows.
        #[arg(long, default_value_t = 5)]
        t_a: usize,
        /// Video steps of all rows.
        #[arg(long, default_value_t = 25)]
        t_o: usize,
    },
    /// Draw coupled (t_O, t_a) pairs and summarize them.
    SampleAns {
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write every draw as a `t_o t_a` line to this file.
        #[arg(long)]
        draws: Option<PathBuf>,
    },
    /// List the configuration keys.
    Keys,
}

fn load_config(args: &ConfigArgs, data: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(d) = data {
        if !args.overrides.iter().any(|o| o.starts_with("train.dataset")) {
            cfg.train.dataset = d.to_path_buf();
        }
    }
    Ok(cfg)
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn gen_data(n: usize, seed: u64, out: &Path) -> Result<()> {
    let mut manifest = generate_dataset(n, seed, out).with_context(|| format!("generating into {}", out.display()))?;
    if n >= 2 {
        let (_, episodes) = load_dataset(out)?;
        let (stats, warnings) = fit_normalizer(&episodes)?;
        for w in warnings {
            log::warn!("{w}");
        }
        manifest.normalizer = Some(stats);
        manifest.save(out)?;
    }
    let successes = manifest.success.iter().filter(|&&s| s).count();
    emit(json!({"command": "gen-data", "out": out, "episodes": n, "seed": seed, "successes": successes}));
    Ok(())
}

fn sample_ans_cmd(n: usize, p: f64, seed: u64, draws: Option<&Path>) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        bail!("--p must lie in [0, 1], got {p}");
    }
    if n == 0 {
        bail!("--n must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut zeros, mut branch2, mut ratio, mut min_gap, mut violations) = (0usize, 0usize, 0.0, f64::INFINITY, 0usize);
    let mut lines = String::new();
    for _ in 0..n {
        let s = sample_ans(&mut rng, p);
        if draws.is_some() {
            lines.push_str(&format!("{} {}\n", s.t_o, s.t_a));
        }
        min_gap = min_gap.min(s.t_o - s.t_a);
        violations += usize::from(s.t_o < s.t_a);
        if s.t_a == 0.0 {
            zeros += 1;
        } else {
            branch2 += 1;
            ratio += (s.t_o - s.t_a) / (1.0 - s.t_a);
        }
    }
    if let Some(path) = draws {
        std::fs::write(path, lines).with_context(|| format!("cannot write {}", path.display()))?;
    }
    emit(json!({
        "command": "sample-ans",
        "n": n,
        "p": p,
        "seed": seed,
        "p_clean_actions": zeros as f64 / n as f64,
        "branch2_mean_ratio": if branch2 > 0 { Some(ratio / branch2 as f64) } else { None },
        "min_gap": min_gap,
        "violations": violations,
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build_global().context("configuring the worker pool")?;
    }
    match cli.command {
        Command::GenData { n, seed, out } => gen_data(n, seed, &out),
        Command::Train { cfg, data, out, resume } => {
            let cfg = load_config(&cfg, data.as_deref())?;
            let (path, records) = train_run(cfg.train, &out, resume.as_deref())?;
            let last = records.last();
            emit(json!({
                "command": "train",
                "checkpoint": path,
                "steps_run": records.len(),
                "final_loss": last.map(|r| r.loss),
            }));
            Ok(())
        }
        Command::Rollout { cfg, checkpoint, expert } => {
            let cfg = load_config(&cfg, None)?;
            let seeds = eval_seeds(cfg.eval.episodes);
            let report = match (&checkpoint, expert) {
                (_, true) => policy_success(Policy::Expert, &seeds, &cfg.eval.rollout())?,
                (Some(path), false) => {
                    let ck = Checkpoint::load(path)?;
                    policy_success(Policy::Model { model: &ck.model, stats: &ck.stats }, &seeds, &cfg.eval.rollout())?
                }
                (None, false) => bail!("--checkpoint or --expert is required"),
            };
            emit(json!({"command": "rollout", "report": report}));
            Ok(())
        }
        Command::Eval4d { cfg, checkpoint, mode } => {
            let cfg = load_config(&cfg, None)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let modes = match mode {
                ModeArg::ActionConditioned => vec![ReconMode::ActionConditioned],
                ModeArg::Joint => vec![ReconMode::Joint],
                ModeArg::Both => vec![ReconMode::ActionConditioned, ReconMode::Joint],
            };
            let seeds = eval_seeds(cfg.eval.recon_episodes);
            for m in modes {
                let report = recon_4d(&ck.model, &ck.stats, &seeds, &cfg.eval.rollout(), m)?;
                emit(json!({"command": "eval-4d", "report": report}));
            }
            Ok(())
        }
        Command::Ablate { cfg, data, out, t_a, t_o } => {
            let cfg = load_config(&cfg, data.as_deref())?;
            let eval = AblationEval { t_a_steps: t_a, t_o_steps: t_o, ..cfg.eval.ablation() };
            let rows = ablation_table(&cfg.train, &out, &eval)?;
            eprint!("{}", format_table(&rows));
            for r in &rows {
                emit(json!({"command": "ablate", "row": r}));
            }
            Ok(())
        }
        Command::SampleAns { n, p, seed, draws } => sample_ans_cmd(n, p, seed, draws.as_deref()),
        Command::Keys => {
            for (k, doc) in KEYS {
                println!("{k:<24} {doc}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
