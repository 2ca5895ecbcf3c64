//! Closed-loop rollouts, 4D reconstruction metrics and the four-row
//! scheduling ablation.

mod ablation;
#[cfg(test)]
mod tests;

pub use ablation::{ablation_rows, ablation_table, format_table, AblationEval, AblationRow, ABLATION_ROWS};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{depth_from_inverse, rgb_from_model, CodecError, NormalizerStats};
use crate::diffusion::{infer_async, DiffusionError, InferOptions, InferenceResult};
use crate::geometry::{
    chamfer_bounded, depth_metrics, image_metrics, unproject_and_fuse, wrist_pose, CameraKind, CameraModel, GeometryError,
    Image, PointCloud, Pose, Quat,
};
use crate::model::{Model, ModelError};
use crate::trainer::{future_frame, record_condition, view_tokens, window_targets, TrainError};
use crate::worldsim::{
    child_seed, expert_action, record_episode, DatasetError, EpisodeRecord, Env, WorldError, ACTION_DIM, FAR_CLIP, NUM_TASKS,
    STATE_DIM, WRIST_VIEW,
};

/// First evaluation seed; training data uses mixed child seeds of its
/// master seed, so consecutive integers from here do not collide in practice.
pub const EVAL_SEED_BASE: u64 = 1_000_000;

/// Quaternions shorter than this cannot be renormalized.
pub const MIN_QUAT_NORM: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// `n` consecutive held-out seeds.
pub fn eval_seeds(n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| EVAL_SEED_BASE + i).collect()
}

/// Task assigned to the `i`-th evaluation episode.
pub fn eval_task(i: usize) -> usize {
    i % NUM_TASKS
}

/// What drives the arm during a rollout.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    Model { model: &'a Model, stats: &'a NormalizerStats },
    /// The scripted demonstrator, queried every control step.
    Expert,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub t_a_steps: usize,
    pub t_o_steps: usize,
    /// Actions executed per inference; defaults to half the chunk.
    pub replan: Option<usize>,
    pub sample_seed: u64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self { t_a_steps: 10, t_o_steps: 50, replan: None, sample_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub task: usize,
    pub success: bool,
    pub steps: usize,
    pub inferences: usize,
}

/// Metrics of one evaluation. Fields that a given evaluation does not
/// measure stay `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub seeds: Vec<u64>,
    pub success_rate: Option<f64>,
    pub episodes: Vec<EpisodeOutcome>,
    /// Model calls until actions were available, per inference.
    pub action_calls: Option<usize>,
    /// Model calls per inference in total.
    pub total_calls: Option<usize>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub absrel: Option<f64>,
    pub delta1: Option<f64>,
    pub chamfer: Option<f64>,
    pub failed_reconstructions: usize,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

struct Rollout {
    outcome: EpisodeOutcome,
    calls: Option<(usize, usize)>,
}

fn rollout_episode(policy: Policy<'_>, seed: u64, task: usize, opts: &RolloutOptions) -> Result<Rollout, EvalError> {
    let (mut env, mut obs) = Env::reset(seed, task)?;
    let mut outcome = EpisodeOutcome { seed, task, success: false, steps: 0, inferences: 0 };
    let mut calls = None;
    loop {
        let chunk: Vec<[f64; ACTION_DIM]> = match policy {
            Policy::Expert => vec![expert_action(env.state())],
            Policy::Model { model, stats } => {
                let cfg = &model.config;
                let views: Vec<Image> = obs.views.iter().map(|v| v.rgb.clone()).collect();
                let cond = crate::diffusion::Condition {
                    task,
                    cond_frames: view_tokens(&views, &cfg.grid)?,
                    cond_state: stats.normalize_state(&obs.state).to_vec(),
                };
                let mut io = InferOptions::new(opts.t_a_steps, opts.t_o_steps, child_seed(opts.sample_seed ^ seed, outcome.inferences as u64));
                io.early_stop = true;
                let r = infer_async(model, &[cond], &io)?.remove(0);
                outcome.inferences += 1;
                calls = Some((r.action_ready_calls, r.total_calls));
                let replan = opts.replan.unwrap_or(cfg.chunk / 2).clamp(1, cfg.chunk);
                r.actions
                    .chunks_exact(ACTION_DIM)
                    .take(replan)
                    .map(|a| stats.denormalize_action(a.try_into().expect("action width")))
                    .collect()
            }
        };
        for a in &chunk {
            let out = env.step(a)?;
            outcome.steps += 1;
            obs = out.observation;
            if out.done {
                outcome.success = out.success;
                return Ok(Rollout { outcome, calls });
            }
        }
    }
}

/// Closed-loop success over `seeds`; episode `i` runs task `i % NUM_TASKS`.
pub fn policy_success(policy: Policy<'_>, seeds: &[u64], opts: &RolloutOptions) -> Result<EvalReport, EvalError> {
    if let Policy::Model { model, stats } = policy {
        let cfg = &model.config;
        if cfg.views != 3 || cfg.grid.width != crate::worldsim::IMAGE_SIZE || stats.state_mask.len() != STATE_DIM {
            return Err(EvalError::Shape("model and world layouts differ".into()));
        }
    }
    let rollouts = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| rollout_episode(policy, seed, eval_task(i), opts))
        .collect::<Result<Vec<_>, _>>()?;
    let successes = rollouts.iter().filter(|r| r.outcome.success).count();
    let calls = rollouts.iter().find_map(|r| r.calls);
    Ok(EvalReport {
        mode: match policy {
            Policy::Expert => "expert".into(),
            Policy::Model { .. } => "policy".into(),
        },
        seeds: seeds.to_vec(),
        success_rate: (!seeds.is_empty()).then(|| successes as f64 / seeds.len() as f64),
        action_calls: calls.map(|c| c.0),
        total_calls: calls.map(|c| c.1),
        episodes: rollouts.into_iter().map(|r| r.outcome).collect(),
        ..EvalReport::default()
    })
}

/// Where the actions of a reconstruction come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReconMode {
    /// Ground-truth states and actions held clean at `t_a = 0`.
    ActionConditioned,
    /// Actions and states generated jointly with the video.
    Joint,
}

impl ReconMode {
    pub fn name(self) -> &'static str {
        match self {
            ReconMode::ActionConditioned => "action-conditioned",
            ReconMode::Joint => "joint",
        }
    }
}

/// Fuses per-view depth maps into one world-frame cloud.
pub fn fused_cloud(depths: &[Image], cams: &[CameraModel]) -> Result<PointCloud, GeometryError> {
    let views: Vec<(&Image, &CameraModel)> = depths.iter().zip(cams).collect();
    unproject_and_fuse(&views, FAR_CLIP)
}

/// Wrist camera placed from a (raw, denormalized) state vector through the
/// hand-eye calibration. `None` when the quaternion is unusable.
pub fn wrist_camera_from_state(ep: &EpisodeRecord, state: &[f64; STATE_DIM]) -> Option<CameraModel> {
    let q = Quat([state[3], state[4], state[5], state[6]]);
    if !(q.norm() >= MIN_QUAT_NORM) {
        return None;
    }
    let ee = Pose::new(q.normalized()?, [state[0], state[1], state[2]]);
    Some(ep.cameras[WRIST_VIEW].with_extrinsic(wrist_pose(&ee, &ep.hand_to_eye)))
}

fn static_views(ep: &EpisodeRecord) -> Vec<usize> {
    (0..ep.cameras.len()).filter(|&v| ep.cameras[v].kind == CameraKind::Static).collect()
}

#[derive(Default)]
struct ReconSample {
    psnr: Vec<f64>,
    ssim: Vec<f64>,
    absrel: Vec<f64>,
    delta1: Vec<f64>,
    chamfer: Vec<f64>,
    failed: bool,
}

fn score_reconstruction(
    model: &Model,
    stats: &NormalizerStats,
    ep: &EpisodeRecord,
    r: &InferenceResult,
    seed: u64,
) -> Result<ReconSample, EvalError> {
    let cfg = &model.config;
    let (v_count, p, tw, dtw) = (cfg.views, cfg.patches(), cfg.token_width(), cfg.depth_token_width());
    let depth_grid = cfg.grid.with_channels(1);
    let statics = static_views(ep);
    let mut out = ReconSample::default();
    for h in 1..=cfg.horizon {
        let f = future_frame(ep, 0, h);
        let mut pred_depths = Vec::with_capacity(v_count);
        for v in 0..v_count {
            let block = (h - 1) * v_count + v;
            let tokens: Vec<f64> = r.video[block * p * tw..(block + 1) * p * tw].iter().map(|&x| rgb_from_model(x)).collect();
            let rgb = cfg.grid.detokenize(&tokens)?;
            if statics.contains(&v) {
                let m = image_metrics(&rgb, &ep.rgb_image(f, v))?;
                out.psnr.push(m.psnr);
                out.ssim.push(m.ssim);
            }
            if let Some(d) = &r.depth {
                pred_depths.push(depth_from_inverse(&depth_grid.detokenize(&d[block * p * dtw..(block + 1) * p * dtw])?));
            }
        }
        if pred_depths.is_empty() {
            continue;
        }
        for &v in &statics {
            let gt = ep.depth_image(f, v);
            let mask = Image { data: vec![1.0; gt.data.len()], ..gt.clone() };
            let m = depth_metrics(&pred_depths[v], &gt, &mask)?;
            out.absrel.push(m.absrel);
            out.delta1.push(m.delta1);
        }
        let raw: [f64; STATE_DIM] = r.states[(h - 1) * STATE_DIM..h * STATE_DIM].try_into().expect("state width");
        let Some(wrist) = wrist_camera_from_state(ep, &stats.denormalize_state(&raw)) else {
            out.failed = true;
            continue;
        };
        let pred_cams: Vec<CameraModel> =
            (0..v_count).map(|v| if v == WRIST_VIEW { wrist } else { ep.camera(f, v) }).collect();
        let gt_cams: Vec<CameraModel> = (0..v_count).map(|v| ep.camera(f, v)).collect();
        let gt_depths: Vec<Image> = (0..v_count).map(|v| ep.depth_image(f, v)).collect();
        let gt_cloud = fused_cloud(&gt_depths, &gt_cams)?;
        match fused_cloud(&pred_depths, &pred_cams).and_then(|c| chamfer_bounded(&c, &gt_cloud, child_seed(seed, h as u64))) {
            Ok(cd) => out.chamfer.push(cd),
            Err(GeometryError::EmptyCloud) => out.failed = true,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Generates the future of frame 0 for each held-out episode with the full
/// `T_O` video budget and scores RGB and depth on the static views and the
/// fused all-view cloud. Depth metrics need the depth branch.
pub fn recon_4d(
    model: &Model,
    stats: &NormalizerStats,
    seeds: &[u64],
    opts: &RolloutOptions,
    mode: ReconMode,
) -> Result<EvalReport, EvalError> {
    let cfg = &model.config;
    let samples = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| -> Result<(ReconSample, usize, usize), EvalError> {
            let (ep, _) = record_episode(seed, eval_task(i))?;
            let cond = record_condition(&ep, 0, cfg, stats)?;
            let mut io = InferOptions::new(opts.t_a_steps, opts.t_o_steps, child_seed(opts.sample_seed, seed));
            io.depth = model.depth_initialized();
            if mode == ReconMode::ActionConditioned {
                io.action_condition = Some(vec![window_targets(&ep, 0, cfg, stats)]);
            }
            let r = infer_async(model, &[cond], &io)?.remove(0);
            let s = score_reconstruction(model, stats, &ep, &r, seed)?;
            Ok((s, r.action_ready_calls, r.total_calls))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let gather = |f: fn(&ReconSample) -> &Vec<f64>| mean(&samples.iter().flat_map(|(s, ..)| f(s).iter().copied()).collect::<Vec<_>>());
    Ok(EvalReport {
        mode: mode.name().into(),
        seeds: seeds.to_vec(),
        action_calls: samples.first().map(|s| s.1),
        total_calls: samples.first().map(|s| s.2),
        psnr: gather(|s| &s.psnr),
        ssim: gather(|s| &s.ssim),
        absrel: gather(|s| &s.absrel),
        delta1: gather(|s| &s.delta1),
        chamfer: gather(|s| &s.chamfer),
        failed_reconstructions: samples.iter().filter(|(s, ..)| s.failed).count(),
        ..EvalReport::default()
    })
}
