//! Experiment plumbing around the trainer: run configuration files,
//! metrics CSV, checkpoints, ablation presets, SVG learning curves, the
//! multi-seed driver, and self-check suites backing `modnet verify`.

pub mod checkpoint;
pub mod config;
pub mod driver;
pub mod metrics;
pub mod plot;
pub mod presets;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use metrics::{MetricsRow, MetricsWriter};
