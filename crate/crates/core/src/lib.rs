//! Gradient spectral analysis for instruction-tuning data.
//!
//! The crate measures how a training sample shapes the gradients of the
//! attention projections (Q, K, V, O) of a decoder: nuclear norm and
//! effective rank of each gradient matrix, cosine similarities within and
//! across layers, plus the data-quality scoring and aggregation needed to
//! compare high- and low-quality subsets.

pub mod analysis;
pub mod gradient;
pub mod matrix;
pub mod model;
pub mod quality;
pub mod similarity;
pub mod spectral;
pub mod store;
pub mod svd;

pub use gradient::{GradientBundle, Projection};
pub use matrix::{Matrix, MatrixError};
