use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    ConfigInvalid(String),

    #[error("missing artifact {what}; run `{stage}` first")]
    MissingArtifact { what: String, stage: &'static str },

    #[error("hash mismatch: {0}")]
    HashMismatch(String),

    #[error("workspace {0} is locked by another run (remove the lock file if it is stale)")]
    Locked(String),

    #[error(transparent)]
    Core(#[from] circomp::error::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> CliError {
        CliError::ConfigInvalid(msg.into())
    }

    pub fn missing(what: impl Into<String>, stage: &'static str) -> CliError {
        CliError::MissingArtifact {
            what: what.into(),
            stage,
        }
    }

    /// Core validation failures surface as config errors.
    pub fn from_core_as_config(e: circomp::error::Error) -> CliError {
        CliError::ConfigInvalid(e.to_string())
    }

    /// Process exit code: 2 config, 3 missing artifact, 4 numeric divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use circomp::error::Error as E;
        match self {
            CliError::ConfigInvalid(_) | CliError::Core(E::InvalidConfig(_)) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Core(E::DivergenceDetected(_)) => 4,
            _ => 1,
        }
    }
}
