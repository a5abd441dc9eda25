use bayesfuse_core::FusionError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input, configuration or files.
    #[error("{0}")]
    User(String),

    /// The sampler or an oracle broke down numerically.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// One or more validation checks failed.
    #[error("validation failed: {}", .0.join(", "))]
    Validation(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::User(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Numerical(_) => CliError::Numerical(e.to_string()),
            other => CliError::User(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::User(format!("JSON: {e}"))
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::User(format!("config: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::User(format!("CSV: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
