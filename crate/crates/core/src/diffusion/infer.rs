use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{integrate_step, DiffusionError, SchedulerState};
use crate::model::{ForwardOutput, Model, ModelConfig, ModelError, TokenSequence};
use crate::worldsim::{child_seed, ACTION_DIM, STATE_DIM};

/// Anything that predicts velocities for a batch of token sequences.
pub trait Denoiser: Sync {
    fn config(&self) -> &ModelConfig;
    fn predict(&self, seqs: &[TokenSequence], depth: bool) -> Result<ForwardOutput, ModelError>;
}

impl Denoiser for Model {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn predict(&self, seqs: &[TokenSequence], depth: bool) -> Result<ForwardOutput, ModelError> {
        self.forward(seqs, depth)
    }
}

/// Counts batched model invocations of the wrapped denoiser.
pub struct CallCounter<'a, D: ?Sized> {
    inner: &'a D,
    calls: AtomicUsize,
}

impl<'a, D: Denoiser + ?Sized> CallCounter<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for CallCounter<'_, D> {
    fn config(&self) -> &ModelConfig {
        self.inner.config()
    }

    fn predict(&self, seqs: &[TokenSequence], depth: bool) -> Result<ForwardOutput, ModelError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(seqs, depth)
    }
}

/// Knows the clean latents and answers with the exact flow velocity
/// `(z_t - z0) / t`, plus the true inverse depth.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub config: ModelConfig,
    /// Per sample: video, states, actions, depth.
    pub clean: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
}

fn oracle_velocity(z: &[f64], z0: &[f64], t: f64) -> Vec<f64> {
    if t <= 0.0 {
        return vec![0.0; z.len()];
    }
    z.iter().zip(z0).map(|(a, b)| (a - b) / t).collect()
}

impl Denoiser for OracleDenoiser {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn predict(&self, seqs: &[TokenSequence], depth: bool) -> Result<ForwardOutput, ModelError> {
        if seqs.len() != self.clean.len() {
            return Err(ModelError::Shape(format!("oracle holds {} samples, got {}", self.clean.len(), seqs.len())));
        }
        let mut out = ForwardOutput { video: vec![], states: vec![], actions: vec![], depth: depth.then(Vec::new) };
        for (s, (v0, s0, a0, d0)) in seqs.iter().zip(&self.clean) {
            out.video.push(oracle_velocity(&s.video, v0, s.t_o));
            out.states.push(oracle_velocity(&s.states, s0, s.t_a));
            out.actions.push(oracle_velocity(&s.actions, a0, s.t_a));
            if let Some(d) = out.depth.as_mut() {
                d.push(d0.clone());
            }
        }
        Ok(out)
    }
}

/// Clean conditioning for one rollout query.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub task: usize,
    /// Current frame of every view, tokenized in model space.
    pub cond_frames: Vec<f64>,
    pub cond_state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOptions {
    pub t_a_steps: usize,
    pub t_o_steps: usize,
    pub seed: u64,
    /// Stop as soon as actions are clean.
    pub early_stop: bool,
    /// Run the depth branch on the final video step.
    pub depth: bool,
    /// Clean per-sample `(states, actions)` to condition on instead of
    /// generating them.
    pub action_condition: Option<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl InferOptions {
    pub fn new(t_a_steps: usize, t_o_steps: usize, seed: u64) -> Self {
        Self { t_a_steps, t_o_steps, seed, early_stop: false, depth: false, action_condition: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult {
    pub video: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    /// Action latents as left after the final model call.
    pub actions_at_end: Vec<f64>,
    pub depth: Option<Vec<f64>>,
    /// Model calls issued before actions became clean.
    pub action_ready_calls: usize,
    pub total_calls: usize,
}

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Two-grid asynchronous sampling. Each model call advances the video grid
/// of size `T_O` by one step and, while `k <= T_a`, the action grid of size
/// `T_a` as well. Afterwards actions stay clean at `t_a = 0` and only the
/// video keeps denoising. All samples of the batch share one model call per
/// step.
pub fn infer_async<D: Denoiser + ?Sized>(
    model: &D,
    conds: &[Condition],
    opts: &InferOptions,
) -> Result<Vec<InferenceResult>, DiffusionError> {
    let (ta_steps, to_steps) = (opts.t_a_steps, opts.t_o_steps);
    if ta_steps == 0 || ta_steps > to_steps {
        return Err(DiffusionError::Steps { t_a_steps: ta_steps, t_o_steps: to_steps });
    }
    if conds.is_empty() {
        return Err(DiffusionError::Shape("empty batch".into()));
    }
    let cfg = model.config();
    let (n_video, n_states, n_actions) =
        (cfg.video_tokens() * cfg.token_width(), cfg.horizon * STATE_DIM, cfg.chunk * ACTION_DIM);
    let pinned = opts.action_condition.as_ref();
    if let Some(p) = pinned {
        if p.len() != conds.len() || p.iter().any(|(s, a)| s.len() != n_states || a.len() != n_actions) {
            return Err(DiffusionError::Shape("action condition does not match the batch".into()));
        }
    }

    let mut seqs: Vec<TokenSequence> = conds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(opts.seed, i as u64));
            let video = noise(&mut rng, n_video);
            let (states, actions) = match pinned {
                Some(p) => p[i].clone(),
                None => (noise(&mut rng, n_states), noise(&mut rng, n_actions)),
            };
            TokenSequence {
                task: c.task,
                t_o: 1.0,
                t_a: if pinned.is_some() { 0.0 } else { 1.0 },
                video_cond: c.cond_frames.clone(),
                video,
                state_cond: c.cond_state.clone(),
                states,
                actions,
            }
        })
        .collect();

    let mut grid_o = SchedulerState::uniform(to_steps)?;
    let mut grid_a = SchedulerState::uniform(ta_steps)?;
    let mut joint = pinned.is_none();
    let mut calls = 0;
    let mut ready_calls = if joint { None } else { Some(0) };
    let mut ready: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut depth = None;

    while let Some((o_from, o_to)) = grid_o.advance() {
        let a_step = if joint { grid_a.advance() } else { None };
        for s in seqs.iter_mut() {
            s.t_o = o_from;
            s.t_a = a_step.map_or(0.0, |(a_from, _)| a_from);
        }
        let last = grid_o.finished();
        let out = model.predict(&seqs, opts.depth && last)?;
        calls += 1;
        for (i, s) in seqs.iter_mut().enumerate() {
            integrate_step(&mut s.video, &out.video[i], o_from, o_to)?;
            if let Some((a_from, a_to)) = a_step {
                integrate_step(&mut s.states, &out.states[i], a_from, a_to)?;
                integrate_step(&mut s.actions, &out.actions[i], a_from, a_to)?;
            }
        }
        if let Some(d) = out.depth {
            depth = Some(d);
        }
        if joint && grid_a.finished() {
            joint = false;
            ready_calls = Some(calls);
            ready = seqs.iter().map(|s| (s.states.clone(), s.actions.clone())).collect();
            if opts.early_stop {
                break;
            }
        }
    }
    if ready.is_empty() {
        ready = seqs.iter().map(|s| (s.states.clone(), s.actions.clone())).collect();
    }
    let action_ready_calls = ready_calls.unwrap_or(calls);
    Ok(seqs
        .into_iter()
        .zip(ready)
        .enumerate()
        .map(|(i, (s, (states, actions)))| InferenceResult {
            video: s.video,
            states,
            actions,
            actions_at_end: s.actions,
            depth: depth.as_ref().map(|d: &Vec<Vec<f64>>| d[i].clone()),
            action_ready_calls,
            total_calls: calls,
        })
        .collect())
}
