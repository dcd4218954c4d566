//! Reverse-mode differentiation over the fixed operator set used by the
//! segmentation network: per-channel input normalisation, same-padded 2-D
//! convolution, ReLU and weighted per-pixel softmax cross-entropy.
//!
//! [`ops`] holds the forward/adjoint kernels as free functions; [`Tape`]
//! records a forward pass and replays the adjoints in reverse order.

pub mod ops;
mod tape;

pub use ops::{conv2d_bwd, conv2d_fwd, relu_bwd, relu_fwd, softmax, softmax_ce, ConvGrads, SoftmaxCe};
pub use tape::{Gradients, NodeId, Tape};
