use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] relaxseg_core::Error),
    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("unsupported dtype code {0} (only 0 = little-endian f32 is defined)")]
    UnsupportedDtype(u8),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("{stage} aborted: {source}; recent losses: {history:?}")]
    Aborted { stage: String, source: relaxseg_core::Error, history: Vec<f64> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }

    /// 1 for usage, config and gating errors; 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Refused(_) => 1,
            Error::Core(relaxseg_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}
