//! Laplacian-pyramid frequency attention for segmentation transformers.
//!
//! The crate is layered bottom-up:
//!
//! * [`numerics`]: dense tensors and a tape-based reverse-mode engine,
//! * [`pyramid`]: Gaussian blur and same-resolution Laplacian pyramids,
//! * [`attention`]: efficient (linear) attention, pyramid frequency
//!   attention, their per-channel fusion and the Kronecker shortcut,
//! * [`blocks`]: patch embedding/merging/expanding, MiX-FFN and the
//!   transformer layer,
//! * [`model`]: the encoder, multi-scale bridge, decoder and checkpoints,
//! * [`training`], [`data`], [`spectral`]: losses, optimizer, metrics,
//!   synthetic data and frequency-response analysis.

pub mod attention;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pyramid;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
pub use model::{Ablation, AttentionKind, LaplacianFormer, ModelConfig};
pub use numerics::{Float, Graph, Tensor, Var};
pub use pyramid::{GaussianSpec, PyramidStack};
pub use spectral::SpectralReport;
