//! Reverse-mode differentiation over dense `f64` matrices, plus the Adam
//! optimizer, a finite-difference gradient checker and the parameter archive
//! format used for checkpoints.

mod adam;
pub mod archive;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, REL_FLOOR};
pub use graph::{log_softmax_rows, softmax_rows, Graph, NodeId};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

pub use tensor::dot;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("data of length {len} does not fit a {rows}x{cols} tensor")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("graph inputs changed since the last forward pass; call forward before backward")]
    Stale,
    #[error("backward root must be 1x1, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),
    #[error("node {node} ({op}) is not an input leaf")]
    NotAnInput { node: usize, op: &'static str },
    #[error("no parameter named `{0}`")]
    UnknownParam(String),
    #[error("non-finite gradient in parameter `{0}`; optimizer step aborted")]
    NonFiniteGradient(String),
    #[error("gradient check: non-finite value at coordinate {coord} ({detail})")]
    NonFiniteProbe { coord: usize, detail: String },
    #[error("gradient check: step size must be positive, got {0}")]
    BadStep(f64),
}
