//! Networks with ternary/binary weights and binary activations.
//!
//! Training optimizes per-weight categorical distributions. Pre-activations
//! are propagated as Gaussians (mean and standard deviation), normalized
//! per channel, mapped to sign probabilities and sampled with a two-class
//! Gumbel-Softmax. Trained distributions are sampled into discrete networks
//! that run on a bit-packed popcount engine.

pub mod data;
pub mod distributions;
pub mod error;
pub mod inference;
pub mod layers;
pub mod model;
pub mod model_io;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::{Gradients, Graph, NodeId, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
