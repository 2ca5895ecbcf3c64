use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{policy_success, recon_4d, EvalError, EvalReport, Policy, ReconMode, RolloutOptions};
use crate::diffusion::{Regime, DEFAULT_ANS_P};
use crate::trainer::{train_run, Checkpoint, TrainConfig};

/// Row label, training regime name, asynchronous inference.
pub const ABLATION_ROWS: [(&str, &str, bool); 4] = [
    ("sync-train + sync-infer", "sync", false),
    ("decoupled-train + sync-infer", "decoupled", false),
    ("decoupled-train + async-infer", "decoupled", true),
    ("ans-train + async-infer", "ans", true),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEval {
    pub policy_seeds: Vec<u64>,
    pub recon_seeds: Vec<u64>,
    /// Action steps of the asynchronous rows.
    pub t_a_steps: usize,
    /// Video steps of every row, and action steps of the synchronous ones.
    pub t_o_steps: usize,
    pub replan: Option<usize>,
    pub sample_seed: u64,
}

impl Default for AblationEval {
    fn default() -> Self {
        Self {
            policy_seeds: super::eval_seeds(50),
            recon_seeds: super::eval_seeds(20),
            t_a_steps: 5,
            t_o_steps: 25,
            replan: None,
            sample_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub train_regime: String,
    pub async_infer: bool,
    pub policy: EvalReport,
    pub recon: EvalReport,
}

/// Evaluates the four rows from checkpoints keyed by regime name.
pub fn ablation_rows(checkpoints: &[(&str, &Checkpoint)], eval: &AblationEval) -> Result<Vec<AblationRow>, EvalError> {
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (label, regime, is_async) in ABLATION_ROWS {
        let ckpt = checkpoints
            .iter()
            .find(|(name, _)| *name == regime)
            .map(|(_, c)| *c)
            .ok_or_else(|| EvalError::Shape(format!("no checkpoint for the {regime} regime")))?;
        let t_a = if is_async { eval.t_a_steps } else { eval.t_o_steps };
        let opts = RolloutOptions { t_a_steps: t_a, t_o_steps: eval.t_o_steps, replan: eval.replan, sample_seed: eval.sample_seed };
        let policy = Policy::Model { model: &ckpt.model, stats: &ckpt.stats };
        let policy = policy_success(policy, &eval.policy_seeds, &opts)?;
        let recon = recon_4d(&ckpt.model, &ckpt.stats, &eval.recon_seeds, &opts, ReconMode::Joint)?;
        rows.push(AblationRow { label: label.into(), train_regime: regime.into(), async_infer: is_async, policy, recon });
    }
    Ok(rows)
}

/// Trains the three regimes from `base` (identical apart from the noise
/// law) into subdirectories of `out`, then evaluates the four rows.
pub fn ablation_table(base: &TrainConfig, out: &Path, eval: &AblationEval) -> Result<Vec<AblationRow>, EvalError> {
    let p = match base.regime {
        Regime::Ans { p } => p,
        _ => DEFAULT_ANS_P,
    };
    let mut trained = Vec::new();
    for (name, regime) in [("sync", Regime::Sync), ("decoupled", Regime::Decoupled), ("ans", Regime::Ans { p })] {
        let cfg = TrainConfig { regime, ..base.clone() };
        let (path, _) = train_run(cfg, &out.join(name), None)?;
        trained.push((name, Checkpoint::load(&path)?));
    }
    let refs: Vec<(&str, &Checkpoint)> = trained.iter().map(|(n, c)| (*n, c)).collect();
    ablation_rows(&refs, eval)
}

fn cell(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

/// Plain-text table, one line per row.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<32} {:>7} {:>6} {:>6} {:>7} {:>6} {:>7} {:>6} {:>8}",
        "variant", "success", "calls", "psnr", "ssim", "absrel", "delta1", "cd", "failed"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<32} {:>7} {:>6} {:>6} {:>7} {:>6} {:>7} {:>6} {:>8}",
            r.label,
            cell(r.policy.success_rate, 2),
            r.policy.action_calls.map_or_else(|| "-".into(), |c| c.to_string()),
            cell(r.recon.psnr, 2),
            cell(r.recon.ssim, 4),
            cell(r.recon.absrel, 4),
            cell(r.recon.delta1, 4),
            cell(r.recon.chamfer, 4),
            r.recon.failed_reconstructions
        );
    }
    s
}
