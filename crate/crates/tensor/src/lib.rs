//! Dense tensors, a tape-based autodiff graph, and an SGD optimizer.

mod error;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::Sgd;
pub use tensor::{encoded_len, DType, Tensor};
