//! Token communication of point-cloud geometry over simulated wireless
//! channels: tokenizer, two-branch encoder, differentiable QAM modulator,
//! AWGN/Rayleigh channel, decoder, metrics and a training harness.

pub mod channel;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod modulator;
pub mod tokenizer;

pub use config::{ChannelKind, Estimator, ExperimentConfig, ModelConfig, RateLoss, TrainConfig};
pub use error::{CoreError, Result};
pub use geometry::PointCloud;
pub use model::{ChannelSpec, ForwardOptions, TokComm};
