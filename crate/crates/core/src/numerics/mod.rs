//! Dense arrays, the differentiable kernel set used by the denoiser, and
//! central-difference gradient verification.

mod gradcheck;
mod graph;
mod scalar;
mod tensor;


pub use gradcheck::{grad_check, GradReport};
pub use graph::{Gradients, Graph, Rotary, Var, LAYER_NORM_EPS};
pub use scalar::Scalar;
pub use tensor::{matmul_plain, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for {len} rows")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("gradient check: {0}")]
    GradCheck(String),
}

/// Names of the differentiable kernels exposed by [`Graph`].
pub fn kernel_set() -> &'static [&'static str] {
    &[
        "matmul",
        "add",
        "sub",
        "mul",
        "add_row",
        "scale",
        "gelu",
        "silu",
        "layer_norm",
        "softmax",
        "attention",
        "rope",
        "gather_rows",
        "concat_rows",
        "slice_rows",
        "slice_cols",
        "mse",
        "sum",
        "mean",
    ]
}
