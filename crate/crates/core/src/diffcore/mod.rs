//! Dense arrays and a small reverse-mode tape.
//!
//! The primitive set is deliberately closed: elementwise arithmetic,
//! `matmul`, channels-last 3D convolution, nearest up/down-sampling,
//! `logistic`, `exp`, reductions and binary cross-entropy. Broadcasting is
//! limited to scalar-with-array and the per-channel bias add.

mod array;
pub mod kernels;
pub mod lsct;
mod optim;
mod tape;

pub use array::Array;
pub use optim::{sgd_step, Adam};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("shape {shape:?} needs a different element count than {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable is not recorded on this tape")]
    NotOnTape,
    #[error("variable does not require gradients")]
    NotDifferentiable,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("{params} parameters but {grads} gradients")]
    ParamCount { params: usize, grads: usize },
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        DiffError::ShapeMismatch {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }
}
