//! Adaptive tensor-network feature extraction and lightweight classification
//! for hyperspectral images.
//!
//! The crate has two stages. The decomposition stage (`sdtn`) fits a
//! fully-connected tensor network to each hyperspectral patch under a
//! combined objective of reconstruction error, gradient-domain low-rank
//! penalties, and Tikhonov regularization, with an energy-threshold rank
//! adaptation pass. The classification stage (`trn`) feeds the reconstructed
//! features through dual 3D/2D convolution pathways, fuses them, and refines
//! the result with a depthwise-separable convolution and channel attention;
//! both stages are trained jointly.
//!
//! Supporting modules: `tensor` (dense tensor algebra), `nn` (reverse-mode
//! differentiation and layers), `data` (cube ingestion, patching, splits),
//! `metrics` (confusion matrix, OA/AA/Kappa, map rendering), `io`
//! (checkpoints and reports), and `cli` (the experiment driver behind the
//! `sdtn` binary).
//!
//! See the crate examples for runnable walkthroughs of each capability.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
mod linalg;
pub mod metrics;
pub mod nn;
pub mod sdtn;
pub mod tensor;
pub mod trn;

pub use error::{Result, SdtnError};
