use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ocarm_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: schema error: missing field `{field}`")]
    Schema { path: PathBuf, line: usize, field: String },
    #[error("{path}: integrity error: {message}")]
    Integrity { path: PathBuf, message: String },
    #[error("{path}: config error: {message}")]
    ConfigFile { path: PathBuf, message: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("refused: {0}")]
    Refused(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
