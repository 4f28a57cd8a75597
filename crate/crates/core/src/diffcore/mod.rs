//! Differentiable substrate: tensors, a reverse-mode tape, MLPs and Adam.

mod adam;
mod gradcheck;
mod graph;
mod linalg;
mod mlp;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, grad_norm, AdamState};
pub use gradcheck::finite_diff_check;
pub use graph::{Activation, Graph, Var};
pub use mlp::{BoundNet, FrozenView, Init, MlpNet};
pub use tensor::Tensor;
