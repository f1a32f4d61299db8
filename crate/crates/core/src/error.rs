use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration. `field` names the offending
    /// setting using a dotted path where one is known.
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("violation injection failed to calibrate: {0}")]
    Calibration(String),

    #[error("degenerate round: every participant has validity score 0")]
    DegenerateRound,

    #[error("client {client} diverged (non-finite update)")]
    Diverged { client: usize },

    #[error("no fit: {0}")]
    NoFit(String),

    #[error("schema error: missing column `{column}` in {file}")]
    Schema { file: String, column: String },

    #[error("input out of range: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::DimensionMismatch { .. } => "dimension",
            Error::Calibration(_) => "calibration",
            Error::DegenerateRound => "degenerate_round",
            Error::Diverged { .. } => "diverged",
            Error::NoFit(_) => "no_fit",
            Error::Schema { .. } => "schema",
            Error::Input(_) => "input",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
