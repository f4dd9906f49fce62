//! Unsupervised skeleton-action representation learning.
//!
//! A residual convolutional autoencoder reconstructs `3 × joints × frames`
//! skeleton sequences. Training can add a graph-Laplacian penalty on the
//! reconstruction, which ties together the coordinates of joints that share a
//! bone, and an adversarial rotation regressor behind a gradient-reversal
//! layer, which pushes the encoder towards viewpoint-invariant codes. The
//! frozen encoder is evaluated with 1-nearest-neighbour and linear probes.
//!
//! Everything runs on a small reverse-mode differentiation engine in
//! [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
mod codec;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod training;
pub mod viewpoint;

pub use error::{Error, Result};
pub use tensor::Tensor;
