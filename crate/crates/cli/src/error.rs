use thiserror::Error;

/// Failure of a command, carrying its exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or a request the inputs cannot satisfy (exit 1).
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] bnanchor_core::Error),
    /// Some runs of a sweep failed; the others were still written (exit 1).
    #[error("{failed} of {total} sweep runs failed; see the status column")]
    RunsFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use bnanchor_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::RunsFailed { .. } => 1,
            CliError::Core(E::Io(_) | E::Corrupt(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => io.into(),
            other => CliError::Core(bnanchor_core::Error::Corrupt(format!("csv: {other:?}"))),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
