//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Values enter as leaves
//! (trainable or constant), every operation appends a node, and
//! [`Tape::backward`] walks the nodes in reverse to fill leaf gradients.

mod check;
mod tape;
mod tensor;

pub use check::{finite_difference_check, gradient_check, GradientCheck};
pub use tape::{sigmoid, NodeId, Tape};
pub use tensor::Tensor;
