//! Minimal differentiable tensor kernel: rank-4 `f64` tensors, a small set of
//! forward ops, a recorded graph for reverse-mode gradients, and a
//! central-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{BinaryKind, CustomOp, Gradients, Graph, UnaryKind, Var};
pub use tensor::{ConvSpec, Tensor};
