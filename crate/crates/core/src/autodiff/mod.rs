//! Tape-based reverse-mode differentiation over image-shaped tensors.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! also a valid topological order. [`Graph::backward`] walks the tape from the
//! output back to the input, accumulating vector-Jacobian products. Nodes that
//! do not depend on any gradient-requiring leaf are evaluated but skipped during
//! the backward sweep, so reference-image statistics cost a forward pass only.
//!
//! The op set is deliberately small: it is exactly what the quality metrics in
//! [`crate::metrics`] need.

mod check;
pub(crate) mod graph;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_relative, replay_diff_check, GradientReport};
pub use graph::{Graph, GraphError, HaarBand, Kernel, Var};
pub use tensor::{Shape, Tensor};
