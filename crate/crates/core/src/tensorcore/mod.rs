//! Dense tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{GradientMap, Graph, NodeId, Op};
pub(crate) use graph::{log_softmax_values, softmax_values};
pub use tensor::{Tensor, TensorError};
