use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or unreadable inputs. Nothing was run.
    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Degenerate(String),

    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Degenerate(_) => 3,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<sparsenas::Error> for CliError {
    fn from(e: sparsenas::Error) -> Self {
        match e {
            sparsenas::Error::DegenerateArchitecture(_) => CliError::Degenerate(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}
