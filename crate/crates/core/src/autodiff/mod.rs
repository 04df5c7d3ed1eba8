//! Dense tensors with reverse-mode automatic differentiation.

mod adam;
mod graph;
pub mod kernels;
pub mod loss;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{Graph, Primitive, Var};
pub use loss::{cross_entropy, cw_margin, kl_divergence, squared_l2};
pub use tensor::{Real, Tensor};
