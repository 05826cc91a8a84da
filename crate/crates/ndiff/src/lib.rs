//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every forward op appends a node to a [`Graph`]; [`Graph::backward`] walks
//! the nodes in reverse and returns a [`Gradients`] map. Parameters are leaves
//! created with [`Graph::param`], everything else is a constant.

mod backward;
mod check;
mod error;
mod graph;
mod kernels;
mod ops;
mod tensor;

pub use backward::Gradients;
pub use check::grad_check;
pub use error::{GradError, Result};
pub use graph::{Graph, Var};
pub use ops::{COSINE_EPS, EXP_CLAMP};
pub use tensor::{broadcast_shape, Tensor};
