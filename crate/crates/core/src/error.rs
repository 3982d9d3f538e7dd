use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed cohort data. `row` is 1-based and counts the header as row 1.
    #[error("data error in {file}{}: {message}", location(*row, column.as_deref()))]
    Data {
        file: String,
        row: Option<usize>,
        column: Option<String>,
        message: String,
    },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn location(row: Option<usize>, column: Option<&str>) -> String {
    match (row, column) {
        (Some(r), Some(c)) => format!(" (row {r}, column '{c}')"),
        (Some(r), None) => format!(" (row {r})"),
        (None, Some(c)) => format!(" (column '{c}')"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn data(file: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data {
            file: file.into(),
            row: None,
            column: None,
            message: message.into(),
        }
    }
}
