//! Experiment driver plumbing: configuration, checkpoints, logs, manifests
//! and the subcommands built on them.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod logs;
pub mod manifest;

pub use checkpoint::{load_checkpoint, save_checkpoint, BestSummary, Checkpoint, CheckpointError, RngPosition};
pub use config::ExperimentConfig;
pub use logs::{emit_plot_data, LossRecord};
pub use manifest::{ManifestEvent, RunManifest};

use std::path::PathBuf;

use thiserror::Error;

use crate::env::EnvError;
use crate::icod::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Missing(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl HarnessError {
    /// 1 for configuration problems, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 1,
            _ => 2,
        }
    }
}
