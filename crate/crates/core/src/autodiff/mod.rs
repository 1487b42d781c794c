//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod kernels;
mod optim;
mod tensor;

pub use graph::{BnState, Graph, RunningStats, Var};
pub use kernels::AffineMap;
pub use optim::{Optimizer, OptimizerKind, ParamStore};
pub use tensor::Tensor;
