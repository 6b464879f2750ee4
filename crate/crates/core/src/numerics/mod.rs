//! Dense tensors, reverse-mode differentiation, Adam, and checkpoints.

mod adam;
pub mod checkpoint;
mod graph;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState, StepOutcome};
pub use checkpoint::Checkpoint;
pub use graph::{FaultGuard, Gradients, Graph, OpKind, Var, EXP_CLAMP, LOG_FLOOR, SPHERE_EPS};
pub use scalar::{sigmoid, softplus, Scalar};
pub use tensor::Tensor;
