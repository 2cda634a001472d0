//! Pretraining: configuration, data, optimizer, checkpoints and the loop.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{stored_dtype, Checkpoint};
pub use config::RunConfig;
pub use data::Corpus;
pub use metrics::{parse_metrics, MetricsLog, StepRecord};
pub use optim::AdamW;
pub use schedule::LrSchedule;
pub use trainer::{pretrain, PretrainSummary, Trainer};
