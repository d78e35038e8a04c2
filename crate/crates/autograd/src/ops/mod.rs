//! Differentiable operations. Each is a method on [`Graph`](crate::Graph)
//! that computes the forward value eagerly and records its backward rule.

mod combine;
mod conv;
mod elementwise;
mod loss;

pub use conv::conv2d_output_size;
