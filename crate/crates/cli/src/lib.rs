//! Pipeline commands behind the `artiqc` binary.

pub mod commands;
pub mod config;
pub mod selftest;

pub use commands::{cmd_score, cmd_simulate, cmd_train_encoder, cmd_train_flow, Dataset, Manifest, ManifestEntry, ScoreOutcome};
pub use config::RunConfig;
pub use selftest::{run_selftest, Check};
