use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] msp_core::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 i/o or file format,
    /// 4 divergence, 5 shape mismatch, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        use msp_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::Json { .. } | E::InvalidArgument(_) => 2,
                E::Io { .. } | E::Format { .. } => 3,
                E::Divergence { .. } | E::NonFinite(_) => 4,
                E::Shape(_) => 5,
                E::NotOnTape(_) | E::RankDeficient { .. } => 1,
            },
        }
    }
}
