//! Flat `key = value` run configuration with `model.`, `train.` and `eval.`
//! prefixes.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use wam4d::diffusion::{Regime, DEFAULT_ANS_P};
use wam4d::eval::{eval_seeds, AblationEval, RolloutOptions};
use wam4d::trainer::TrainConfig;

/// Documented keys with a short description each, in help order.
pub const KEYS: &[(&str, &str)] = &[
    ("model.width", "hidden width d"),
    ("model.depth", "trunk blocks N"),
    ("model.depth_blocks", "replicated depth-branch blocks M"),
    ("model.heads", "attention heads"),
    ("model.horizon", "future frames H"),
    ("model.chunk", "actions per chunk K (4 per frame)"),
    ("model.patch", "patch size in pixels"),
    ("model.ffn_mult", "feed-forward expansion"),
    ("model.rope_base", "rotary frequency base"),
    ("train.total_steps", "optimizer steps"),
    ("train.warmup_steps", "linear warmup steps"),
    ("train.peak_lr", "peak learning rate"),
    ("train.batch_size", "windows per step"),
    ("train.lambda_state", "state loss weight"),
    ("train.lambda_action", "action loss weight"),
    ("train.lambda_depth", "depth loss weight"),
    ("train.regime", "sync | decoupled | ans"),
    ("train.ans_p", "probability of clean actions in the ans mixture"),
    ("train.seed", "run seed"),
    ("train.depth_branch", "attach the depth branch (true/false)"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.clip_norm", "global gradient-norm clip"),
    ("train.checkpoint_every", "periodic checkpoint interval, 0 = final only"),
    ("train.dataset", "dataset directory"),
    ("train.max_episodes", "use only the first n episodes"),
    ("eval.t_a_steps", "action denoising steps T_a"),
    ("eval.t_o_steps", "video denoising steps T_O"),
    ("eval.replan", "actions executed per inference (default K/2)"),
    ("eval.episodes", "closed-loop episodes"),
    ("eval.recon_episodes", "reconstruction episodes"),
    ("eval.sample_seed", "seed of the inference noise"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub t_a_steps: usize,
    pub t_o_steps: usize,
    pub replan: Option<usize>,
    pub episodes: usize,
    pub recon_episodes: usize,
    pub sample_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { t_a_steps: 10, t_o_steps: 50, replan: None, episodes: 50, recon_episodes: 20, sample_seed: 0 }
    }
}

impl EvalConfig {
    pub fn rollout(&self) -> RolloutOptions {
        RolloutOptions { t_a_steps: self.t_a_steps, t_o_steps: self.t_o_steps, replan: self.replan, sample_seed: self.sample_seed }
    }

    /// Ablation settings; the step budgets come from this config.
    pub fn ablation(&self) -> AblationEval {
        AblationEval {
            policy_seeds: eval_seeds(self.episodes),
            recon_seeds: eval_seeds(self.recon_episodes),
            t_a_steps: self.t_a_steps,
            t_o_steps: self.t_o_steps,
            replan: self.replan,
            sample_seed: self.sample_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    ans_p: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), eval: EvalConfig::default(), ans_p: DEFAULT_ANS_P }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| anyhow!("invalid value {value:?} for {key}"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("invalid value {value:?} for {key}: expected true or false"),
    }
}

impl RunConfig {
    /// Defaults overlaid with a config file (if any) and then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", p.display()))?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let ans_p = self.ans_p;
        let (t, e) = (&mut self.train, &mut self.eval);
        match key {
            "model.width" => t.model.width = num(key, v)?,
            "model.depth" => t.model.depth = num(key, v)?,
            "model.depth_blocks" => t.model.depth_blocks = num(key, v)?,
            "model.heads" => t.model.heads = num(key, v)?,
            "model.horizon" => t.model.horizon = num(key, v)?,
            "model.chunk" => t.model.chunk = num(key, v)?,
            "model.patch" => t.model.grid.patch = num(key, v)?,
            "model.ffn_mult" => t.model.ffn_mult = num(key, v)?,
            "model.rope_base" => t.model.rope_base = num(key, v)?,
            "train.total_steps" => t.total_steps = num(key, v)?,
            "train.warmup_steps" => t.warmup_steps = num(key, v)?,
            "train.peak_lr" => t.peak_lr = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lambda_state" => t.weights.state = num(key, v)?,
            "train.lambda_action" => t.weights.action = num(key, v)?,
            "train.lambda_depth" => t.weights.depth = num(key, v)?,
            "train.regime" => {
                t.regime = match v {
                    "sync" => Regime::Sync,
                    "decoupled" => Regime::Decoupled,
                    "ans" => Regime::Ans { p: ans_p },
                    _ => bail!("invalid value {v:?} for {key}: expected sync, decoupled or ans"),
                }
            }
            "train.ans_p" => {
                let p_new = num(key, v)?;
                if let Regime::Ans { p } = &mut t.regime {
                    *p = p_new;
                }
                self.ans_p = p_new;
            }
            "train.seed" => t.seed = num(key, v)?,
            "train.depth_branch" => t.depth_branch = flag(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.clip_norm" => t.clip_norm = num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "train.dataset" => t.dataset = PathBuf::from(v),
            "train.max_episodes" => t.max_episodes = Some(num(key, v)?),
            "eval.t_a_steps" => e.t_a_steps = num(key, v)?,
            "eval.t_o_steps" => e.t_o_steps = num(key, v)?,
            "eval.replan" => e.replan = Some(num(key, v)?),
            "eval.episodes" => e.episodes = num(key, v)?,
            "eval.recon_episodes" => e.recon_episodes = num(key, v)?,
            "eval.sample_seed" => e.sample_seed = num(key, v)?,
            _ => bail!("unknown configuration key {key:?}"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_documented_key_is_accepted() {
        let mut cfg = RunConfig::default();
        let sample = |k: &str| match k {
            "train.regime" => "decoupled",
            "train.depth_branch" => "false",
            "train.dataset" => "elsewhere",
            "train.peak_lr" | "train.ans_p" | "model.rope_base" => "0.25",
            _ => "3",
        };
        for (k, _) in KEYS {
            cfg.set(k, sample(k)).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn file_then_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\ntrain.regime = ans\ntrain.ans_p = 0.3\n\nmodel.width = 64  # trailing\n").unwrap();
        assert_eq!(cfg.train.regime, Regime::Ans { p: 0.3 });
        assert_eq!(cfg.train.model.width, 64);
        cfg.set("train.regime", "sync").unwrap();
        assert_eq!(cfg.train.regime, Regime::Sync);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_named() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("train.steps = 5").unwrap_err();
        assert!(format!("{err:#}").contains("train.steps"));
        let err = cfg.set("train.regime", "fast").unwrap_err();
        assert!(err.to_string().contains("train.regime"));
        assert!(cfg.apply_text("no equals sign").is_err());
    }
}
