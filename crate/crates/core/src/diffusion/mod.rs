//! Flow-matching corruption, coupled noise-level sampling, the Euler
//! integrator, training losses and asynchronous action/video denoising.

mod infer;
mod loss;

pub use infer::{infer_async, CallCounter, Condition, Denoiser, InferOptions, InferenceResult, OracleDenoiser};
pub use loss::{assemble_loss, training_loss, LossComponents, LossTargets, LossVars, LossWeights, TrainExample};

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("noise levels violate 0 <= t_a <= t_O <= 1: t_O={t_o}, t_a={t_a}")]
    NoiseLevels { t_o: f64, t_a: f64 },
    #[error("invalid step {t_from} -> {t_to}: need 0 <= t_to < t_from <= 1")]
    Grid { t_from: f64, t_to: f64 },
    #[error("need 1 <= T_a <= T_O, got T_a={t_a_steps}, T_O={t_o_steps}")]
    Steps { t_a_steps: usize, t_o_steps: usize },
    #[error("non-finite {component} loss")]
    NonFinite { component: &'static str },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Coupled per-sample noise levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub t_o: f64,
    pub t_a: f64,
}

impl NoiseLevels {
    pub fn new(t_o: f64, t_a: f64) -> Result<Self, DiffusionError> {
        if !(0.0..=1.0).contains(&t_o) || !(0.0..=1.0).contains(&t_a) || t_a > t_o {
            return Err(DiffusionError::NoiseLevels { t_o, t_a });
        }
        Ok(Self { t_o, t_a })
    }
}

pub const BETA_ALPHA: f64 = 1.5;
pub const BETA_BETA: f64 = 1.0;
pub const DEFAULT_ANS_P: f64 = 0.5;

/// Second mixture branch: `t_O = t_a + (1 - t_a) * b`.
pub fn ans_rescale(t_a: f64, b: f64) -> f64 {
    t_a + (1.0 - t_a) * b
}

/// Asynchronous noise sampling: with probability `p` actions are clean and
/// the video level is uniform; otherwise `t_a ~ U(0,1)` and `t_O` is a
/// Beta(1.5, 1) draw rescaled onto `[t_a, 1]`.
pub fn sample_ans<R: Rng + ?Sized>(rng: &mut R, p: f64) -> NoiseLevels {
    if rng.random::<f64>() < p {
        NoiseLevels { t_o: rng.random::<f64>(), t_a: 0.0 }
    } else {
        let t_a = rng.random::<f64>();
        let b = Beta::new(BETA_ALPHA, BETA_BETA).expect("valid Beta parameters").sample(rng);
        NoiseLevels { t_o: ans_rescale(t_a, b).min(1.0), t_a }
    }
}

/// Training-time law for `(t_O, t_a)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Regime {
    /// `t_O = t_a ~ U(0,1)`.
    Sync,
    /// Independent uniforms; may produce `t_O < t_a`.
    Decoupled,
    Ans { p: f64 },
}

impl Regime {
    /// Draws one pair. Decoupled draws are not required to be ordered, so the
    /// raw pair is returned rather than a validated [`NoiseLevels`].
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        match *self {
            Regime::Sync => {
                let t = rng.random::<f64>();
                (t, t)
            }
            Regime::Decoupled => (rng.random::<f64>(), rng.random::<f64>()),
            Regime::Ans { p } => {
                let n = sample_ans(rng, p);
                (n.t_o, n.t_a)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regime::Sync => "sync",
            Regime::Decoupled => "decoupled",
            Regime::Ans { .. } => "ans",
        }
    }
}

/// `z_t = (1 - t) z0 + t eps` and the velocity target `eps - z0`.
pub fn noisify(z0: &[f64], eps: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(z0.len(), eps.len(), "noisify operands differ in length");
    let zt = z0.iter().zip(eps).map(|(&x, &e)| (1.0 - t) * x + t * e).collect();
    let v = z0.iter().zip(eps).map(|(&x, &e)| e - x).collect();
    (zt, v)
}

/// One Euler step of `dz/dt = v` from `t_from` down to `t_to`.
pub fn integrate_step(z: &mut [f64], v: &[f64], t_from: f64, t_to: f64) -> Result<(), DiffusionError> {
    if !(0.0..=1.0).contains(&t_to) || !(0.0..=1.0).contains(&t_from) || t_to >= t_from {
        return Err(DiffusionError::Grid { t_from, t_to });
    }
    if z.len() != v.len() {
        return Err(DiffusionError::Shape(format!("latent {} vs velocity {}", z.len(), v.len())));
    }
    let dt = t_to - t_from;
    for (x, &vi) in z.iter_mut().zip(v) {
        *x += dt * vi;
    }
    Ok(())
}

/// Uniform decreasing timestep grid `1, 1 - 1/T, ..., 0` with a cursor.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerState {
    pub grid: Vec<f64>,
    pub index: usize,
}

impl SchedulerState {
    pub fn uniform(steps: usize) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::Steps { t_a_steps: 0, t_o_steps: 0 });
        }
        let grid = (0..=steps).map(|i| if i == steps { 0.0 } else { 1.0 - i as f64 / steps as f64 }).collect();
        Ok(Self { grid, index: 0 })
    }

    pub fn current(&self) -> f64 {
        self.grid[self.index]
    }

    pub fn finished(&self) -> bool {
        self.index + 1 >= self.grid.len()
    }

    /// Returns `(t_from, t_to)` and advances, or `None` at the end.
    pub fn advance(&mut self) -> Option<(f64, f64)> {
        if self.finished() {
            return None;
        }
        let pair = (self.grid[self.index], self.grid[self.index + 1]);
        self.index += 1;
        Some(pair)
    }
}
