//! Dense tensors, a reverse-mode tape and SGD.

mod graph;
mod optim;
mod tensor;

pub use graph::{Conv2dGeometry, Gradients, Graph, Var};
pub use optim::{Param, Sgd, SgdConfig};
pub use tensor::{argmax, Scalar, Tensor};

pub(crate) use graph::softmax_row;
