//! Datasets, file formats, evaluation and run configuration.

pub mod config;
pub mod dataset;
pub mod format;
pub mod metrics;

pub use config::{RunConfig, RunDir};
pub use dataset::{gen_planted_dataset, Dataset, PlantedSpec, Split};
pub use format::{load_dataset, load_model, save_dataset, save_model};
pub use metrics::{evaluate, EvalOptions, Metrics};
