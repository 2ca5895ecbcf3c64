//! Unified 4D world-action modeling at desk scale.
//!
//! A diffusion-transformer denoiser jointly predicts future multi-view RGB
//! video, inverse depth, proprioceptive states and action chunks. Video and
//! actions are corrupted at coupled noise levels during training and decoded
//! asynchronously at inference so actions are available after a fraction of
//! the video denoising steps. A deterministic synthetic RGB-D manipulation
//! world supplies data with exact ground truth.

pub mod numerics;
pub mod geometry;
pub mod worldsim;
pub mod codec;
pub mod model;
pub mod diffusion;
pub mod trainer;
pub mod eval;
