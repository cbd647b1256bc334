use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error(transparent)]
    Core(#[from] llgrid_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 0 pass, 1 verification failure, 2 usage or config, 3 non-convergence.
    pub fn exit_code(&self) -> i32 {
        use llgrid_core::Error as E;
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::NonConvergence(_) => 3,
            Self::Core(
                E::Budget { .. } | E::InvalidGrid(_) | E::Domain(_) | E::Parse(_) | E::CoincidenceCap { .. },
            ) => 2,
            Self::Core(E::EigenStagnation { .. }) => 3,
            _ => 1,
        }
    }
}
