use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::codec::PatchGrid;
use crate::numerics::{Rotary, Scalar};
use crate::worldsim::{ACTION_DIM, IMAGE_SIZE, NUM_TASKS, STATE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    /// Trunk depth N.
    pub depth: usize,
    /// Replicated depth-branch blocks M.
    pub depth_blocks: usize,
    pub heads: usize,
    pub views: usize,
    /// Future frames H.
    pub horizon: usize,
    /// Actions per chunk K.
    pub chunk: usize,
    pub grid: PatchGrid,
    pub tasks: usize,
    pub ffn_mult: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 128,
            depth: 6,
            depth_blocks: 2,
            heads: 4,
            views: 3,
            horizon: 4,
            chunk: 16,
            grid: PatchGrid { patch: 8, width: IMAGE_SIZE, height: IMAGE_SIZE, channels: 3 },
            tasks: NUM_TASKS,
            ffn_mult: 4,
            rope_base: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.depth_blocks >= self.depth {
            return bad(format!("depth-branch size M={} must be below trunk depth N={}", self.depth_blocks, self.depth));
        }
        if self.chunk != 4 * self.horizon {
            return bad(format!("action chunk K={} must equal 4*H={}", self.chunk, 4 * self.horizon));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if !self.head_dim().is_multiple_of(2) || self.head_dim() < 6 {
            return bad(format!("head width {} cannot hold three rotary axes", self.head_dim()));
        }
        if !self.width.is_multiple_of(2) || self.views == 0 || self.horizon == 0 || self.tasks == 0 || self.ffn_mult == 0 {
            return bad("width must be even; views, horizon, tasks and ffn_mult positive".into());
        }
        PatchGrid::new(self.grid.patch, self.grid.width, self.grid.height, self.grid.channels)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn patches(&self) -> usize {
        self.grid.patches()
    }

    pub fn token_width(&self) -> usize {
        self.grid.token_width()
    }

    pub fn depth_token_width(&self) -> usize {
        self.grid.patch * self.grid.patch
    }

    pub fn cond_video_tokens(&self) -> usize {
        self.views * self.patches()
    }

    pub fn video_tokens(&self) -> usize {
        self.horizon * self.views * self.patches()
    }

    /// `V(1+H)P + (1+H) + K`.
    pub fn seq_len(&self) -> usize {
        self.views * (1 + self.horizon) * self.patches() + (1 + self.horizon) + self.chunk
    }

    /// Rotary pairs per head assigned to (temporal, row, column).
    pub fn rope_split(&self) -> [usize; 3] {
        let pairs = self.head_dim() / 2;
        let spatial = pairs / 3;
        [pairs - 2 * spatial, spatial, spatial]
    }

    /// Per-token metadata in sequence order, with the given noise levels.
    pub fn metadata(&self, t_o: f64, t_a: f64) -> Vec<TokenMeta> {
        let (p, pr) = (self.patches(), self.grid.patches_per_row());
        let mut out = Vec::with_capacity(self.seq_len());
        let video = |modality, frame: usize, timestep, out: &mut Vec<TokenMeta>| {
            for view in 0..self.views {
                for i in 0..p {
                    out.push(TokenMeta { modality, view: Some(view), time: frame as f64, row: i / pr, col: i % pr, timestep });
                }
            }
        };
        video(Modality::VideoCond, 0, 0.0, &mut out);
        for f in 1..=self.horizon {
            video(Modality::Video, f, t_o, &mut out);
        }
        let flat = |modality, time, timestep| TokenMeta { modality, view: None, time, row: 0, col: 0, timestep };
        out.push(flat(Modality::StateCond, 0.0, 0.0));
        for f in 1..=self.horizon {
            out.push(flat(Modality::State, f as f64, t_a));
        }
        for j in 1..=self.chunk {
            out.push(flat(Modality::Action, (j * self.horizon) as f64 / self.chunk as f64, t_a));
        }
        out
    }

    /// Rotation table for one sequence: temporal, patch-row and patch-column
    /// frequencies occupy consecutive pair ranges of every head.
    pub fn rotary<S: Scalar>(&self) -> Arc<Rotary<S>> {
        let meta = self.metadata(0.0, 0.0);
        let split = self.rope_split();
        let pairs = self.head_dim() / 2;
        let mut cos = Vec::with_capacity(meta.len() * pairs);
        let mut sin = Vec::with_capacity(meta.len() * pairs);
        for m in &meta {
            let coords = [m.time, m.row as f64, m.col as f64];
            for (axis, &n) in split.iter().enumerate() {
                for i in 0..n {
                    let freq = self.rope_base.powf(-(i as f64) / n as f64);
                    let angle = coords[axis] * freq;
                    cos.push(S::of(angle.cos()));
                    sin.push(S::of(angle.sin()));
                }
            }
        }
        Arc::new(Rotary { rows: meta.len(), pairs, cos, sin })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    VideoCond,
    Video,
    StateCond,
    State,
    Action,
}

impl Modality {
    pub const ALL: [Modality; 5] = [Modality::VideoCond, Modality::Video, Modality::StateCond, Modality::State, Modality::Action];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_conditioning(self) -> bool {
        matches!(self, Modality::VideoCond | Modality::StateCond)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenMeta {
    pub modality: Modality,
    pub view: Option<usize>,
    pub time: f64,
    pub row: usize,
    pub col: usize,
    pub timestep: f64,
}

/// One unified denoising sequence `[z_O0, z_O1:H, z_s0, z_s1:H, z_a1:K]` in
/// model space. Video blocks are frame-major, then view, then patch.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub task: usize,
    pub t_o: f64,
    pub t_a: f64,
    pub video_cond: Vec<f64>,
    pub video: Vec<f64>,
    pub state_cond: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
}

impl TokenSequence {
    pub fn metadata(&self, cfg: &ModelConfig) -> Vec<TokenMeta> {
        cfg.metadata(self.t_o, self.t_a)
    }

    pub fn len(&self, cfg: &ModelConfig) -> usize {
        cfg.seq_len()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn build_sequence(
    cfg: &ModelConfig,
    task: usize,
    cond_frames: Vec<f64>,
    noisy_video: Vec<f64>,
    cond_state: Vec<f64>,
    noisy_states: Vec<f64>,
    noisy_actions: Vec<f64>,
    t_o: f64,
    t_a: f64,
) -> Result<TokenSequence, ModelError> {
    if !(0.0..=1.0).contains(&t_a) || !(0.0..=1.0).contains(&t_o) || t_a > t_o {
        return Err(ModelError::NoiseLevels { t_o, t_a });
    }
    if task >= cfg.tasks {
        return Err(ModelError::Task(task));
    }
    let tw = cfg.token_width();
    let checks = [
        ("conditioning frames", cond_frames.len(), cfg.cond_video_tokens() * tw),
        ("noisy video", noisy_video.len(), cfg.video_tokens() * tw),
        ("conditioning state", cond_state.len(), STATE_DIM),
        ("noisy states", noisy_states.len(), cfg.horizon * STATE_DIM),
        ("noisy actions", noisy_actions.len(), cfg.chunk * ACTION_DIM),
    ];
    for (what, got, want) in checks {
        if got != want {
            return Err(ModelError::Shape(format!("{what}: {got} values, expected {want}")));
        }
    }
    Ok(TokenSequence {
        task,
        t_o,
        t_a,
        video_cond: cond_frames,
        video: noisy_video,
        state_cond: cond_state,
        states: noisy_states,
        actions: noisy_actions,
    })
}
