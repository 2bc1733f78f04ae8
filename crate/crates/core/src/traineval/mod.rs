//! Objective, data, optimisation, retrieval evaluation and cost analysis.

pub mod analysis;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod sweep;
pub mod train;

pub use analysis::{count_flops, count_params};
pub use data::{generate_synthetic, sample_clip, Dataset, SynthConfig, TrackletSample};
pub use metrics::RetrievalResult;
pub use train::{evaluate, train, TrainConfig};
