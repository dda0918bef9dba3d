//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! with the convolution, attention and normalization primitives needed by
//! saliency networks, plus parameter storage and an Adam optimizer.
//!
//! Everything runs on one thread and is bit-reproducible for a fixed input.

pub mod check;
pub mod error;
pub mod nn;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::ConvGeometry;
pub use ops::elementwise::sigmoid_tensor;
pub use ops::shape::concat;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
