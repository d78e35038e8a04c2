//! Minimal dense-tensor engine with tape-based reverse-mode automatic
//! differentiation, sized for small convolutional encoder-decoders.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Values are computed eagerly; [`Graph::backward`] then walks the tape in
//! reverse creation order and accumulates gradients into every reached node.
//! Leaves created with [`Graph::constant`] never receive gradient.

mod element;
mod error;
mod graph;
mod gradcheck;
pub mod ops;
mod tensor;

pub use element::{gemm, Element, MatView};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheck, DEFAULT_EPS};
pub use graph::{Graph, Operation, Var};
pub use ops::conv2d_output_size;
pub use tensor::Tensor;
