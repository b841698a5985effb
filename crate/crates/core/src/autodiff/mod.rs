//! Reverse-mode automatic differentiation over dense tensors, restricted to
//! the operator set used by the segmentation and classification networks.

mod conv;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

use thiserror::Error;

pub use conv::{conv3x3_backward_input, conv3x3_backward_params, conv3x3_forward};
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, NodeId};
pub use optim::{he_normal, sgd_step, Parameter};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("maxpool3d needs even spatial dims, got {0:?}")]
    OddDims([usize; 3]),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op} produced a non-finite value during the {pass} pass")]
    NonFinite {
        op: &'static str,
        pass: &'static str,
    },
    #[error("class label {0} out of range")]
    BadLabel(u8),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
