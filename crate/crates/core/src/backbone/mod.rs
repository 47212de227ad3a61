//! The four-stage backbone, its ablation layouts and a small trainer.

pub mod blocks;
pub mod config;
pub mod model;
pub mod train;

pub use blocks::{global_pool, Downsample, EncoderBlock, SeConvBlock};
pub use config::{BackboneConfig, BlockKind, ConfigFile, DownsampleKind, PosEncoding, StageConfig, Variant};
pub use model::{Backbone, FeaturePyramid, CONFIG_META};
pub use train::{synthetic_patterns, toy_train, AdamW, TrainConfig};
