//! SimpleX collaborative filtering: the cosine contrastive loss, the
//! history-aware SimpleX encoder, five baseline losses, uniform negative
//! sampling, Adam training and full-ranking top-K evaluation.
//!
//! Build with `--no-default-features` to drop rayon and run every
//! data-parallel loop sequentially.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod loss;
pub mod metrics;
pub mod par;
pub mod sampler;
pub mod synthetic;
pub mod trainer;
pub mod verify;

pub use dataset::{build_histories, load_interactions, HistoryTable, InteractionDataset};
pub use encoder::{Aggregation, EncoderConfig, ModelParams, Similarity};
pub use loss::{LossConfig, LossKind};
pub use metrics::MetricReport;
pub use sampler::SamplerConfig;
pub use trainer::{train, ModelConfig, TrainConfig, TrainMode};
