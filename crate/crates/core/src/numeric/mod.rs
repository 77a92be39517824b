//! Dense tensors with reverse-mode differentiation.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
mod scalar;
pub mod tensor;

pub use graph::{concat, CustomOp, Graph, NormKind, UnaryKind, Var, NORM_EPS};
pub use params::{AdamConfig, Binding, ParamEntry, ParamStore};
pub use scalar::{DType, Real};
pub use tensor::Tensor;
