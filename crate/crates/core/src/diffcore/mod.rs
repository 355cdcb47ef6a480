//! Reverse-mode differentiation on a define-by-run tape.
//!
//! Every forward operation appends a [`DiffNode`] to a [`Tape`]. A graph is
//! built per step and discarded afterwards. [`Tape::backward`] returns plain
//! gradients; [`Tape::backward_differentiable`] records the backward pass as
//! further tape operations so the result can be differentiated again, which
//! is what training through an inner gradient step needs.
//!
//! All values are `f64`.

mod backward;
pub mod kernels;
mod losses;
mod tape;
mod tensor;

pub use backward::{DiffGradMap, GradMap};
pub use losses::{huber, mse};
pub use tape::{shape_numel, sigmoid, DiffNode, NodeId, Op, Tape};
pub use tensor::Tensor;
