//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is rebuilt for every forward pass. Leaves are copied from
//! [`Tensor`]s, operations append nodes, and [`Graph::backward`] sweeps the
//! tape in reverse insertion order.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with_step, GradCheck, DEFAULT_STEP};
pub use graph::{BnBatchStats, BnMode, Gradients, Graph, Var, BN_EPS};
pub use tensor::Tensor;
