//! Command implementations behind the `npmatch` binary. Each command is a
//! plain function returning a serializable report, so tests can drive them
//! without spawning a process.

pub mod config;
pub mod divergence;
pub mod eval;
pub mod gradcheck;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use config::RunConfigFile;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] npmatch::Error),
    #[error("cannot read config file {}: {source}", path.display())]
    ReadConfig { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed override `{0}`: expected key=value")]
    Override(String),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;
