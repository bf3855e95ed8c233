//! Tensor arithmetic, reverse-mode gradients and finite-difference checks.

mod gradcheck;
mod optim;
mod params;
pub mod rng;
mod sparse;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::AdamW;
pub use params::{ParamId, ParamStore, Parameter};
pub use sparse::CsrMatrix;
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::stable_sigmoid;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward called on a node that was never recorded")]
    BackwardBeforeForward,
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function under gradient check is not deterministic")]
    NonDeterministic,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
