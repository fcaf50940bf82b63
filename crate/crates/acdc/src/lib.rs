//! Atom-coefficient decomposed convolution (ACDC): convolution kernels
//! factorized into per-substructure 2D dictionary atoms and coefficient
//! tensors shared across networks, blocks, layers, or filter groups.
//!
//! The crate provides the decomposition itself with reverse-mode automatic
//! differentiation, sharing-scheme allocation with grouped convolution and
//! channel shuffle, atom-drop regularization, parameter/FLOP accounting,
//! CCA-based cross-layer analysis, toy-scale training, and all-layer class
//! activation map export. The `acdc` binary exposes all of it as a CLI.

pub mod autograd;
pub mod cam;
pub mod cca;
pub mod checkpoint;
pub mod counts;
pub mod data;
pub mod decomp;
pub mod error;
pub mod linalg;
pub mod manifest;
pub mod model;
pub mod presets;
pub mod rank;
pub mod scalar;
pub mod sharing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

/// Library version, recorded in run manifests and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
