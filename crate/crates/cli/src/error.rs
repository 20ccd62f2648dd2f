use serde_json::json;
use thiserror::Error;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config file or parameter values.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(mcref_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl From<mcref_core::Error> for CliError {
    fn from(e: mcref_core::Error) -> Self {
        match e {
            mcref_core::Error::Validation(msg) => CliError::Usage(msg),
            other => CliError::Core(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }

    pub fn kind(&self) -> &'static str {
        use mcref_core::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Runtime(_) => "runtime",
            CliError::Core(e) => match e {
                E::Dimension(_) => "dimension",
                E::Validation(_) => "usage",
                E::State(_) => "state",
                E::Diverged { .. } => "diverged",
                E::Parse { .. } => "parse",
                E::Format { .. } => "format",
                E::Oracle(_) => "oracle",
                E::Io(_) => "io",
                E::Json(_) => "json",
            },
        }
    }

    /// The single-line JSON written to stderr.
    pub fn to_json(&self) -> String {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}
