use thiserror::Error;

/// Errors split by exit code: configuration and usage problems exit 1,
/// failures while running exit 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config field `{field}`: {constraint}")]
    Config { field: String, constraint: String },
    #[error(transparent)]
    Core(#[from] ptransfer_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            _ => 2,
        }
    }

    pub fn config(field: &str, constraint: impl Into<String>) -> Self {
        CliError::Config {
            field: field.to_string(),
            constraint: constraint.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
