//! Dense tensors with a dynamic reverse-mode tape.
//!
//! Every differentiable kernel in the crate records a node on a [`Tape`]
//! together with its vector-Jacobian product. [`gradcheck`] verifies those
//! products against central finite differences in `f64`.

mod conv;
mod elementwise;
mod gradcheck;
mod linalg;
pub mod parallel;
mod real;
mod shape;
mod tape;
mod tensor;

pub use conv::{conv2d, conv2d_padded, max_pool2d, resize_bilinear};
pub use elementwise::{broadcast_shape, broadcast_to, elementwise, Elementwise};
pub use gradcheck::{gradcheck, GradCheck, GradCheckReport};
pub use linalg::{add_bias, channel_mix, matmul};
pub use real::Real;
pub use shape::{concat, gather_last, max_dim, mean, mean_dim, reshape, subsample, sum};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
