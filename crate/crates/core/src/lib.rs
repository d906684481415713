//! Lightweight 1-D fault-diagnosis networks built from multi-scale
//! depthwise separable convolutions and broadcast self-attention, plus the
//! tooling around them: a reverse-mode autodiff tape, exact parameter and
//! FLOPs accounting, a synthetic point-machine sound corpus, and a
//! training / ablation harness.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod complexity;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod mdsc;
pub mod model;
pub mod par;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
