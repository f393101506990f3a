//! Cross-modal image–text retrieval toolkit.
//!
//! * [`tensor`]: dense `f64` kernels (matmul, softmax, conv2d, layer norm, GELU).
//! * [`windowing`], [`gwg`], [`gswin`]: the global/local window image encoder.
//! * [`text`]: toy text encoder, masking and the fusion encoder.
//! * [`losses`]: contrastive, triplet, masked-token and matching objectives
//!   with analytic gradients and a finite-difference checker.
//! * [`smr`]: similarity-matrix reweighting rerank.
//! * [`eval`]: Recall@K, mean recall, ground truth and synthetic corpora.
//! * [`io`] and [`config`]: file formats and run configuration.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod config;
pub mod demo;
pub mod error;
pub mod eval;
pub mod gswin;
pub mod gwg;
pub mod io;
pub mod losses;
pub mod similarity;
pub mod smr;
pub mod tensor;
pub mod text;
pub mod windowing;

pub use error::{Error, Result};
pub use similarity::{Direction, SimilarityMatrix};
pub use tensor::Tensor;
