//! File formats, parallel drivers and the command-line front end around
//! `beliefnet-core`.

pub mod checkpoint;
pub mod config;
pub mod driver;
pub mod export;
pub mod trajectories;

use std::path::{Path, PathBuf};

use beliefnet_core::data::DataError;
use beliefnet_core::eval::EvalError;
use beliefnet_core::model::ModelError;
use beliefnet_core::sim::SimError;
use beliefnet_core::train::TrainError;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{parse_config, ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}: {source}", path.display())]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }
}
