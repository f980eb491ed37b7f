//! Minimal CPU neural-network engine: tensors, a reverse-mode tape, and optimizers.

pub mod gemm;
mod layout;
mod optim;
mod tape;
mod tensor;

pub use layout::ParamLayout;
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{sigmoid, Binding, ConvParams, Gradients, Tape, Var};
pub use tensor::Tensor;
