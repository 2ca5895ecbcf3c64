use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{noisify, DiffusionError};
use crate::model::{Model, ModelError, TokenSequence};
use crate::numerics::{Graph, NumericsError, Scalar, Tensor, Var};
use crate::worldsim::{ACTION_DIM, STATE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub state: f64,
    pub action: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { state: 1.0, action: 1.0, depth: 1.0 }
    }
}

/// One clean training window in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub task: usize,
    pub cond_frames: Vec<f64>,
    pub video: Vec<f64>,
    pub cond_state: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    /// Inverse-depth patches aligned with `video` tokens.
    pub depth: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub video: Var,
    pub state: Var,
    pub action: Var,
    pub depth: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub video: f64,
    pub state: f64,
    pub action: f64,
    pub depth: f64,
}

impl LossVars {
    /// Reads the component values, rejecting non-finite ones by name.
    pub fn components<S: Scalar>(&self, g: &Graph<S>) -> Result<LossComponents, DiffusionError> {
        let read = |v: Var, component: &'static str| {
            let x = g.value(v).data()[0].f64();
            if x.is_finite() {
                Ok(x)
            } else {
                Err(DiffusionError::NonFinite { component })
            }
        };
        Ok(LossComponents {
            video: read(self.video, "video")?,
            state: read(self.state, "state")?,
            action: read(self.action, "action")?,
            depth: self.depth.map(|d| read(d, "depth")).transpose()?.unwrap_or(0.0),
            total: read(self.total, "total")?,
        })
    }
}

/// Targets for one batch, flattened sample-major.
pub struct LossTargets<S> {
    pub video: Tensor<S>,
    pub states: Tensor<S>,
    pub actions: Tensor<S>,
    pub depth: Option<Tensor<S>>,
    pub state_weights: Arc<Vec<S>>,
    pub action_weights: Arc<Vec<S>>,
}

fn named<T>(r: Result<T, NumericsError>, component: &'static str) -> Result<T, DiffusionError> {
    r.map_err(|e| match e {
        NumericsError::NonFinite { .. } => DiffusionError::NonFinite { component },
        other => DiffusionError::Model(other.into()),
    })
}

/// `L_O + λ_s L_s + λ_a L_a + λ_D L_depth` over prediction handles.
pub fn assemble_loss<S: Scalar>(
    g: &mut Graph<S>,
    pred: (Var, Var, Var, Option<Var>),
    targets: LossTargets<S>,
    w: &LossWeights,
) -> Result<LossVars, DiffusionError> {
    let (pv, ps, pa, pd) = pred;
    let tv = g.constant(targets.video);
    let video = named(g.mse(pv, tv, None), "video")?;
    let ts = g.constant(targets.states);
    let state = named(g.mse(ps, ts, Some(targets.state_weights)), "state")?;
    let ta = g.constant(targets.actions);
    let action = named(g.mse(pa, ta, Some(targets.action_weights)), "action")?;
    let depth = match (pd, targets.depth) {
        (Some(pd), Some(td)) => {
            let td = g.constant(td);
            Some(named(g.mse(pd, td, None), "depth")?)
        }
        _ => None,
    };
    let mut total = video;
    for (v, lambda) in [(Some(state), w.state), (Some(action), w.action), (depth, w.depth)] {
        if let Some(v) = v {
            let scaled = named(g.scale(v, S::of(lambda)), "total")?;
            total = named(g.add(total, scaled), "total")?;
        }
    }
    let vars = LossVars { total, video, state, action, depth };
    vars.components(g)?;
    Ok(vars)
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Corrupts each example at its `(t_O, t_a)` with fresh Gaussian noise, runs
/// the model and builds the weighted flow-matching loss. States share the
/// action level. State and action terms are masked on unsupervised
/// dimensions and on samples whose actions are clean conditioning
/// (`t_a = 0`). The depth term is included whenever the branch exists.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    params: &[Var],
    model: &Model,
    examples: &[TrainExample],
    levels: &[(f64, f64)],
    rng: &mut R,
    weights: &LossWeights,
    masks: (&[bool], &[bool]),
) -> Result<LossVars, DiffusionError> {
    if examples.len() != levels.len() || examples.is_empty() {
        return Err(DiffusionError::Shape(format!("{} examples vs {} noise levels", examples.len(), levels.len())));
    }
    let (state_mask, action_mask) = masks;
    if state_mask.len() != STATE_DIM || action_mask.len() != ACTION_DIM {
        return Err(DiffusionError::Shape("dimension masks do not match the state/action layout".into()));
    }
    let with_depth = model.depth_initialized();
    let mut seqs = Vec::with_capacity(examples.len());
    let (mut tv, mut ts, mut ta, mut td) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut sw, mut aw) = (Vec::new(), Vec::new());
    for (ex, &(t_o, t_a)) in examples.iter().zip(levels) {
        if !(0.0..=1.0).contains(&t_o) || !(0.0..=1.0).contains(&t_a) {
            return Err(DiffusionError::NoiseLevels { t_o, t_a });
        }
        let (zv, vv) = noisify(&ex.video, &normal_vec(rng, ex.video.len()), t_o);
        let (zs, vs) = noisify(&ex.states, &normal_vec(rng, ex.states.len()), t_a);
        let (za, va) = noisify(&ex.actions, &normal_vec(rng, ex.actions.len()), t_a);
        tv.extend(vv);
        ts.extend(vs);
        ta.extend(va);
        if with_depth {
            td.extend_from_slice(&ex.depth);
        }
        let active = if t_a > 0.0 { 1.0 } else { 0.0 };
        sw.extend((0..ex.states.len()).map(|i| S::of(if state_mask[i % STATE_DIM] { active } else { 0.0 })));
        aw.extend((0..ex.actions.len()).map(|i| S::of(if action_mask[i % ACTION_DIM] { active } else { 0.0 })));
        // decoupled draws may have t_a > t_O, so the sequence is built directly
        seqs.push(TokenSequence {
            task: ex.task,
            t_o,
            t_a,
            video_cond: ex.cond_frames.clone(),
            video: zv,
            state_cond: ex.cond_state.clone(),
            states: zs,
            actions: za,
        });
    }
    let out = model.forward_graph(g, params, &seqs, with_depth)?;
    let shape_of = |v: Var, g: &Graph<S>| g.value(v).shape().to_vec();
    let targets = LossTargets {
        video: Tensor::from_f64(&shape_of(out.video, g), &tv).map_err(ModelError::from)?,
        states: Tensor::from_f64(&shape_of(out.states, g), &ts).map_err(ModelError::from)?,
        actions: Tensor::from_f64(&shape_of(out.actions, g), &ta).map_err(ModelError::from)?,
        depth: match out.depth {
            Some(d) => Some(Tensor::from_f64(&shape_of(d, g), &td).map_err(ModelError::from)?),
            None => None,
        },
        state_weights: Arc::new(sw),
        action_weights: Arc::new(aw),
    };
    assemble_loss(g, (out.video, out.states, out.actions, out.depth), targets, weights)
}
