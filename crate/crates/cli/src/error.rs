use std::path::PathBuf;

/// Failures of a CLI invocation, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("check failed: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Engine(#[from] negdiff_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 0 is success; 1 a failed check or numerical failure; 2 a bad
    /// configuration; 3 a file that could not be read or written.
    pub fn exit_code(&self) -> i32 {
        use negdiff_core::Error as E;
        match self {
            Self::Mismatch(_) => 1,
            Self::Config(_) => 2,
            Self::Io { .. } => 3,
            Self::Engine(e) => match e {
                E::Parameter(_) | E::UnknownConcept(_) | E::World { .. } | E::Shape { .. } | E::Index { .. } => 2,
                E::DegenerateNoise { .. } | E::Training { .. } | E::Invariant(_) => 1,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
