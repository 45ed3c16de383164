use std::path::{Path, PathBuf};

/// Errors of the file formats, commands and server. Each maps to a process
/// exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("frame {frame}: {source}")]
    Frame { frame: usize, source: Box<Error> },
    #[error(transparent)]
    Core(dntx_core::Error),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("does not start with the DNTC1 magic bytes")]
    Magic,
    #[error("format version {0} is not supported")]
    Version(u32),
    #[error("is truncated: {0}")]
    Truncated(String),
    #[error("manifest is corrupt: {0}")]
    Manifest(String),
    #[error("does not match the model: {0}")]
    Mismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// 2 configuration, 3 numerical, 4 I/O and file formats, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 3,
            Error::Io { .. } | Error::Checkpoint(_) | Error::Dataset(_) => 4,
            Error::Frame { source, .. } => source.exit_code(),
            Error::Core(e) => match e {
                dntx_core::Error::Config(_)
                | dntx_core::Error::Level(_)
                | dntx_core::Error::UnknownExpression(_)
                | dntx_core::Error::Timeline(_)
                | dntx_core::Error::Ciec(_) => 2,
                dntx_core::Error::NonFinite(_) | dntx_core::Error::Diverged { .. } => 3,
                _ => 1,
            },
        }
    }

    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }
}

impl From<dntx_core::Error> for Error {
    fn from(e: dntx_core::Error) -> Self {
        Error::Core(e)
    }
}
