//! Dense `f64` tensors with a recorded graph for reverse-mode gradients.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{gelu, Graph, NodeId, Segment};
pub use tensor::Tensor;
