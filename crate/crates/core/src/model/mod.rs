//! The unified denoiser: sequence assembly, per-token timestep modulation,
//! view and task embeddings, factorized rotary positions, and the replicated
//! depth branch that reads the main branch through cross-attention.

mod net;
mod sequence;

pub use net::{BlockIds, CrossIds, DepthIds, ForwardOutput, ForwardVars, Layout, Linear, Model, ParamStore};
pub use sequence::{build_sequence, Modality, ModelConfig, TokenMeta, TokenSequence};

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("noise levels violate 0 <= t_a <= t_O <= 1: t_O={t_o}, t_a={t_a}")]
    NoiseLevels { t_o: f64, t_a: f64 },
    #[error("unknown task id {0}")]
    Task(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("depth branch requested but not initialized")]
    DepthUninitialized,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
