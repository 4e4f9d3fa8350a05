use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{0}")]
    Config(String),
    #[error("row {row}, column {column}: {detail}")]
    Parse { row: usize, column: String, detail: String },
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    EmptySplit(String),
    #[error("{0}")]
    Protocol(String),
    #[error("{0}")]
    Transfer(String),
    #[error("{0}")]
    Contract(String),
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("domain {domain}: non-finite loss in round {round} at batch {batch}")]
    NonFiniteLoss { domain: String, round: usize, batch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    /// Short stable tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Numerics(_) => "numerics",
            Error::Config(_) | Error::TomlDe(_) | Error::TomlSer(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::EmptySplit(_) => "empty-split",
            Error::Protocol(_) => "protocol",
            Error::Transfer(_) => "transfer",
            Error::Contract(_) => "contract",
            Error::Version { .. } => "version",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
