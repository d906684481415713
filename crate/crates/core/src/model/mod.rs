//! The four ablation networks and their building blocks.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod standard;

pub use config::{AttnKind, ConvKind, EncoderConfig, ModelConfig, StageConfig, StemConfig, Variant};
pub use network::{Attention, ConvBlock, EncoderLayer, Network};
pub use standard::{standard_multiscale_param_count, StandardMultiScaleBlock};
