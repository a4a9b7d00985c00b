use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error(transparent)]
    Model(#[from] tsde::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Parse { .. } => "parse",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Csv(_) => "csv",
            CliError::Model(_) => "model",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Config(_) => 2,
            _ => 1,
        }
    }

    /// Machine-readable form written on failure.
    pub fn record(&self) -> Value {
        let mut rec = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            CliError::Parse { line, column, .. } => {
                rec["line"] = json!(line);
                rec["column"] = json!(column);
            }
            CliError::Config(list) => rec["violations"] = json!(list),
            _ => {}
        }
        rec
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Csv(e.to_string())
    }
}
