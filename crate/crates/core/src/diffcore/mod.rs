//! Dense `f64` tensors with a small reverse-mode tape.
//!
//! The primitive set is closed: dense linear map, strided 2-D convolution,
//! ReLU, elementwise add, scalar-weighted sum, global average pooling, 2×2
//! strided downsampling and softmax cross-entropy. Everything runs single
//! threaded on one tape; separate tapes can live on separate threads.

mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

use thiserror::Error;

pub use checkpoint::{load as load_checkpoint, read_checkpoint, save as save_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport, Sampling, KINK_TOLERANCE, MAX_REFINE};
pub use graph::{log_sum_exp, softmax, Gradients, Graph, NodeId, Op, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite values in `{0}`")]
    NonFinite(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("loss node `{0}` is not scalar")]
    NonScalarLoss(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
