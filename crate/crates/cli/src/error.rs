use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Lib(#[from] lata::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    MissingArgument(String),
    #[error("{0}")]
    Config(String),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn kind(&self) -> &str {
        match self {
            CliError::Lib(e) => e.kind(),
            CliError::Usage(_) => "UsageError",
            CliError::MissingArgument(_) => "MissingArgument",
            CliError::Config(_) => "ConfigError",
            CliError::Json(_) => "ConfigError",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Lib(e) => e.class().exit_code(),
            _ => 2,
        }
    }

    /// The single JSON object written to stderr.
    pub fn to_json(&self) -> String {
        json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}
