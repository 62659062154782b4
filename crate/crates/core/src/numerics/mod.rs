//! Dense tensors, a deterministic RNG, and tape-based reverse-mode autodiff.

mod graph;
mod rng;
mod scalar;
mod tensor;

pub use graph::{CustomOp, Graph, Var};
pub use rng::Rng;
pub use scalar::{log_add_exp, log_sum_exp, Scalar};
pub use tensor::Tensor;
