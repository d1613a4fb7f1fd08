//! Dense tensors, a reverse-mode tape, SplitMix64 randomness and AdamW.

pub(crate) mod kernels;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use optim::{cosine_lr, AdamWConfig, AdamWState};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root is not recorded on this tape")]
    DetachedRoot,
    #[error("variance must be non-negative, got {0}")]
    NegativeVariance(f64),
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("schedule step {step} outside 0..={total_steps}")]
    StepOutOfRange { step: u64, total_steps: u64 },
}
