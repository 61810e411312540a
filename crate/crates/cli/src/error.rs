use std::path::{Path, PathBuf};

use dspp::DsppError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {source}", path.display())]
    Input { path: PathBuf, source: DsppError },

    #[error("{}: {source}", path.display())]
    Checkpoint { path: PathBuf, source: DsppError },

    #[error("training diverged in epoch {epoch} ({detail}); the last good model was written")]
    Diverged { epoch: usize, detail: String },

    #[error(transparent)]
    Model(#[from] DsppError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_owned(),
            source,
        }
    }

    /// A failure reading `path`; I/O failures keep their own category.
    pub fn input(path: &Path, source: DsppError) -> Self {
        match source {
            DsppError::Io(e) => CliError::io(path, e),
            source => CliError::Input {
                path: path.to_owned(),
                source,
            },
        }
    }

    pub fn checkpoint(path: &Path, source: DsppError) -> Self {
        match source {
            DsppError::Io(e) => CliError::io(path, e),
            source => CliError::Checkpoint {
                path: path.to_owned(),
                source,
            },
        }
    }

    /// 2 usage, 3 I/O, 4 malformed config or data, 5 incompatible
    /// checkpoint, 6 diverged, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Input { .. } => 4,
            CliError::Checkpoint { .. } => 5,
            CliError::Diverged { .. } => 6,
            CliError::Model(e) => match e {
                DsppError::Io(_) => 3,
                DsppError::Config(_)
                | DsppError::Parse { .. }
                | DsppError::Unsorted(_)
                | DsppError::UnstableSpec(_) => 4,
                DsppError::Checkpoint(_) => 5,
                _ => 1,
            },
        }
    }
}
