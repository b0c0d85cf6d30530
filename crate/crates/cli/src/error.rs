use std::path::{Path, PathBuf};

use cvf_core::engine::EngineError;
use cvf_core::losses::LossError;
use cvf_core::model::ModelError;
use cvf_core::ncu::NcuError;
use cvf_core::world::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Input { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error("bad input {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ncu(#[from] NcuError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{source} (step dump: {dump})")]
    NonFinite { source: EngineError, dump: PathBuf },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn input(path: &Path, source: std::io::Error) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn output(path: &Path, source: std::io::Error) -> Self {
        CliError::Output {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 config/input, 3 training contract, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NonFinite { .. } => 4,
            CliError::Engine(e) => engine_code(e),
            CliError::Output { .. } => 1,
            _ => 2,
        }
    }
}

fn engine_code(e: &EngineError) -> i32 {
    match e {
        EngineError::NonFinite { .. } => 4,
        EngineError::Contract(_) | EngineError::Memorization { .. } => 3,
        EngineError::Config(_) | EngineError::Ncu(_) | EngineError::Model(_) => 2,
        EngineError::Loss(LossError::Weights(_)) => 2,
        _ => 1,
    }
}
