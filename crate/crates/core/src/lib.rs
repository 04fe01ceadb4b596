//! Low-rank adaptation of frozen 3D convolutional backbones for binary
//! volume classification.
//!
//! Each adapted convolution keeps its kernel `W` frozen and learns factors
//! `A` (`r × d_in·k³`) and `B` (`d_out × r`); the effective kernel is
//! `W + scale · reshape(B·A)`. `B` starts at zero, so an untrained model
//! computes exactly what the frozen backbone does.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use checkpoint::{AnyTensor, Checkpoint, CheckpointKind, CheckpointMeta};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use lora::{lora_param_count, AdaptedConv3d, LoraAdapter};
pub use model::{build_classifier, BackboneConfig, Classifier, HeadSettings, LoraSettings};
pub use rng::RandomSource;
pub use tensor::{DType, Scalar, Tensor};
