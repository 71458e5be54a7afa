use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key '{key}': {msg}")]
    Config { key: String, msg: String },
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error(transparent)]
    Core(#[from] cen_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn key(key: &str, msg: impl Into<String>) -> Self {
        CliError::Config {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
