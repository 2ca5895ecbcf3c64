use crate::codec::{inverse_depth, rgb_to_model, CodecError, NormalizerStats, PatchGrid};
use crate::diffusion::{Condition, TrainExample};
use crate::geometry::Image;
use crate::model::ModelConfig;
use crate::worldsim::{EpisodeRecord, ACTION_DIM, CONTROL_PER_FRAME, STATE_DIM};

/// RGB views in the symmetric model range, tokenized view after view.
pub fn view_tokens(views: &[Image], grid: &PatchGrid) -> Result<Vec<f64>, CodecError> {
    let mut out = Vec::with_capacity(views.len() * grid.patches() * grid.token_width());
    for img in views {
        let scaled = Image { data: img.data.iter().map(|&x| rgb_to_model(x)).collect(), ..img.clone() };
        out.extend(grid.tokenize(&scaled)?);
    }
    Ok(out)
}

/// Inverse-depth views tokenized on the single-channel grid.
pub fn inverse_depth_tokens(depths: &[Image], grid: &PatchGrid) -> Result<Vec<f64>, CodecError> {
    let g1 = grid.with_channels(1);
    let mut out = Vec::new();
    for d in depths {
        out.extend(g1.tokenize(&inverse_depth(d))?);
    }
    Ok(out)
}

pub fn frame_tokens(ep: &EpisodeRecord, frame: usize, grid: &PatchGrid) -> Result<Vec<f64>, CodecError> {
    let views: Vec<Image> = (0..ep.cameras.len()).map(|v| ep.rgb_image(frame, v)).collect();
    view_tokens(&views, grid)
}

pub fn frame_depth_tokens(ep: &EpisodeRecord, frame: usize, grid: &PatchGrid) -> Result<Vec<f64>, CodecError> {
    let views: Vec<Image> = (0..ep.cameras.len()).map(|v| ep.depth_image(frame, v)).collect();
    inverse_depth_tokens(&views, grid)
}

pub fn widen<const N: usize>(x: &[f32; N]) -> [f64; N] {
    x.map(f64::from)
}

/// Number of valid window starts: every frame that has a successor.
pub fn window_starts(ep: &EpisodeRecord) -> usize {
    ep.frames.len().saturating_sub(1)
}

/// Future frame `h` (1-based) after `start`, holding the last frame past the end.
pub fn future_frame(ep: &EpisodeRecord, start: usize, h: usize) -> usize {
    (start + h).min(ep.frames.len() - 1)
}

/// Ground-truth normalized `(states, actions)` of the window at `start`.
/// Actions past the end of the episode are zero (hold).
pub fn window_targets(
    ep: &EpisodeRecord,
    start: usize,
    cfg: &ModelConfig,
    stats: &NormalizerStats,
) -> (Vec<f64>, Vec<f64>) {
    let mut states = Vec::with_capacity(cfg.horizon * STATE_DIM);
    for h in 1..=cfg.horizon {
        states.extend(stats.normalize_state(&widen(&ep.states[future_frame(ep, start, h)])));
    }
    let mut actions = Vec::with_capacity(cfg.chunk * ACTION_DIM);
    for j in 0..cfg.chunk {
        let raw = ep.actions.get(start * CONTROL_PER_FRAME + j).map_or([0.0; ACTION_DIM], widen);
        actions.extend(stats.normalize_action(&raw));
    }
    (states, actions)
}

/// Clean conditioning at frame `start` of a recorded episode.
pub fn record_condition(
    ep: &EpisodeRecord,
    start: usize,
    cfg: &ModelConfig,
    stats: &NormalizerStats,
) -> Result<Condition, CodecError> {
    Ok(Condition {
        task: ep.task,
        cond_frames: frame_tokens(ep, start, &cfg.grid)?,
        cond_state: stats.normalize_state(&widen(&ep.states[start])).to_vec(),
    })
}

/// Full clean training window starting at frame `start`.
pub fn window_example(
    ep: &EpisodeRecord,
    start: usize,
    cfg: &ModelConfig,
    stats: &NormalizerStats,
) -> Result<TrainExample, CodecError> {
    if ep.cameras.len() != cfg.views {
        return Err(CodecError::Dimension(format!("{} recorded views vs {} model views", ep.cameras.len(), cfg.views)));
    }
    if start >= window_starts(ep) {
        return Err(CodecError::Dimension(format!("window start {start} beyond {} frames", ep.frames.len())));
    }
    let cond = record_condition(ep, start, cfg, stats)?;
    let (mut video, mut depth) = (Vec::new(), Vec::new());
    for h in 1..=cfg.horizon {
        let f = future_frame(ep, start, h);
        video.extend(frame_tokens(ep, f, &cfg.grid)?);
        depth.extend(frame_depth_tokens(ep, f, &cfg.grid)?);
    }
    let (states, actions) = window_targets(ep, start, cfg, stats);
    Ok(TrainExample { task: ep.task, cond_frames: cond.cond_frames, video, cond_state: cond.cond_state, states, actions, depth })
}
