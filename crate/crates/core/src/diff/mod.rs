//! Define-by-run reverse-mode differentiation over [`Tensor`](crate::Tensor)s.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so that order is already topological and
//! [`Graph::backward`] just walks it in reverse.

mod check;
mod graph;
mod ops;

pub use check::{finite_difference_grad, relative_error, GradCheckReport};
pub use graph::{Graph, Var};
pub use ops::{avg_pool_forward, conv1d_forward, ConvMode, ElementwiseOp};
