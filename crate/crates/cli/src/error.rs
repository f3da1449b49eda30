use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("artifact {0} is locked by another writer")]
    Locked(String),
    #[error(transparent)]
    Core(#[from] entk::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(entk::Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(entk::Error::Json(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Missing(_) => "missing_artifact",
            CliError::Config(_) => "config",
            CliError::Locked(_) => "locked",
            CliError::Core(e) => match e {
                entk::Error::Config(_) => "config",
                entk::Error::NonFinite { .. }
                | entk::Error::Numeric(_)
                | entk::Error::Solver(_) => "numeric",
                entk::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                    "missing_artifact"
                }
                entk::Error::Shape(_) | entk::Error::Input(_) => "input",
                entk::Error::Format(_) | entk::Error::Corrupt(_) => "format",
                entk::Error::Io(_) | entk::Error::Json(_) => "io",
            },
        }
    }

    /// 2 for a missing artifact, 3 for a bad config, 4 for a numeric failure,
    /// 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "missing_artifact" => 2,
            "config" => 3,
            "numeric" => 4,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Payload<'a> {
            error: &'a str,
            message: String,
            exit_code: u8,
        }
        let p = Payload {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        };
        serde_json::to_string(&p).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", self.kind()))
    }
}
