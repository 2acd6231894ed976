//! Spatial and temporal self-attention networks for skeleton-based action
//! recognition, with the graph/temporal convolution units they replace, a
//! small reverse-mode autodiff engine, skeleton data handling, and training.
//!
//! Activations inside the network use a channels-last layout `[N, T, V, C]`
//! (batch, frame, joint, channel). Clips on disk and at the network input use
//! `[N, C, T, V, M]`.

pub mod attention;
pub mod autodiff;
pub mod conv;
pub mod error;
pub mod gradsuite;
pub mod network;
pub mod nn;
pub mod skeleton;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
