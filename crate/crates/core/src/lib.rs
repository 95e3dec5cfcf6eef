//! Window-enhanced video transformer for dense-scene action detection.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape, kernels, gradient checks
//!   and the Adam optimizer.
//! - [`video`]: raw clip I/O, patch embedding and positional encodings.
//! - [`lra`]: the convolutional local relation aggregator branch.
//! - [`wea`]: strongest-response window selection and windowed attention.
//! - [`backbone`]: model configuration, parameters and the transformer stack.
//! - [`head`]: 3D RoI pooling, the multi-label classifier and its loss.
//! - [`eval`]: IoU, average precision and frame-mAP.
//! - [`data`]: annotation CSVs, the synthetic classroom generator, statistics
//!   and train/test splits.
//! - [`train`]: the training and inference loops tying everything together.

pub mod backbone;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod head;
pub mod lra;
pub mod nn;
pub mod par;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod video;
pub mod wea;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};

/// Relative box `(x1, y1, x2, y2)`.
pub type BoxRel = [f64; 4];
