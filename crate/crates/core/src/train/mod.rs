//! Byte-level language-model training at desk scale.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use checkpoint::{config_digest, Checkpoint};
pub use config::{lr_at, TrainConfig};
pub use data::{load_corpus, Batch, Dataset};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
pub use optim::{clip_grads, global_grad_norm, AdamW};
pub use trainer::{train, RunStatus, RunSummary, Trainer};
