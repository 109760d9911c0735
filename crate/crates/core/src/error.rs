use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's contract.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value violates a divisibility or range constraint.
    #[error("configuration error: `{field}` {detail}")]
    Config { field: String, detail: String },

    /// Caller-supplied data is malformed (empty token list, bad label, ...).
    #[error("input error: {0}")]
    Input(String),

    /// An API precondition was broken by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user-supplied configuration or input,
    /// as opposed to failures that happen while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Input(_) | Error::Shape { .. } | Error::Contract(_)
        )
    }
}
