//! Dense tensors and reverse-mode automatic differentiation.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::{adam_step, warmup_cosine, AdamConfig, AdamState};
pub use scalar::Scalar;
pub(crate) use graph::softmax_in_place;
pub use tensor::Tensor;
