//! Config-driven experiment runner on top of `rlfat-core`.

pub mod config;
pub mod metrics;
pub mod pipeline;

pub use config::{load_config, parse_config, ExperimentConfig};
pub use metrics::{read_metrics, MetricsLog, MetricsRecord};
