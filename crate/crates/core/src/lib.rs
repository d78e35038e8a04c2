//! Channel-exchanging networks at desk scale.
//!
//! Streams share convolution weights and keep private normalization banks.
//! At every exchange site, a channel whose scaling factor has been driven
//! below a threshold by the L1 penalty is replaced with the mean of the
//! other streams at that channel.

pub mod batch;
mod codec;
mod error;
pub mod exchange;
pub mod harness;
pub mod models;
pub mod normalization;
pub mod params;
pub mod rng;
pub mod synthdata;

pub use error::{CenError, Result};
