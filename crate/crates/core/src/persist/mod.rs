//! Run configuration, checkpoint container and metrics streams.

mod checkpoint;
mod config;
mod metrics;

#[cfg(test)]
mod tests;

pub use checkpoint::{
    load_denoiser, load_lm, load_tokenizer, save_denoiser, save_lm, save_tokenizer, Checkpoint,
    Stage, TensorData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::Config;
pub use metrics::{MetricsFormat, MetricsWriter};
