use thiserror::Error;

pub type Result<T> = std::result::Result<T, AtlasError>;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("strace summary for {app}: no header line with `calls` and `syscall` columns")]
    MissingHeader { app: String },

    #[error("unknown pinned architecture `{0}`")]
    UnknownArch(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
