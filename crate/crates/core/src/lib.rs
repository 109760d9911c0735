//! Multimodal flood classification from scratch.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`graph`], [`params`], [`optim`]: dense tensors, a
//!   reverse-mode autodiff tape, named parameters and AdamW.
//! * [`mfim`]: text/image interaction (stub encoders, BiLSTM, multi-scale
//!   convolutions, coarse/medium/fine self-attention, gating, cross-modal
//!   attention, joint fusion).
//! * [`hcamam`]: residual group/point convolutions followed by FFT-modulated
//!   channel and spatial attention.
//! * [`cctfrm`]: gated-convolution encoder, transformer bottleneck, cascading
//!   decoder and the reverse feature harmonizer.
//! * [`uffm`]: fusion head, BCE loss and thresholding.
//! * [`model`], [`train`], [`metrics`]: the assembled classifier, its training
//!   loop and evaluation statistics.
//! * [`config`], [`data`], [`checkpoint`], [`gradcheck`], [`gradcam`]:
//!   harness plumbing shared by the CLI and the browser demo.

pub mod cctfrm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod gradcheck;
pub mod graph;
pub mod hcamam;
mod kernels;
pub mod metrics;
pub mod mfim;
pub mod nn;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod uffm;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use model::Model;
pub use params::ParamStore;
pub use tensor::Tensor;
