use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty caption")]
    EmptyCaption,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("schema violation in record `{record}`, field `{field}`: {msg}")]
    Schema {
        record: String,
        field: String,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty pooling window")]
    EmptyPoolingWindow,

    #[error("empty ground truth")]
    EmptyGroundTruth,

    #[error("degenerate supervision")]
    DegenerateSupervision,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn schema(
        record: impl Into<String>,
        field: impl Into<String>,
        msg: impl Into<String>,
    ) -> Self {
        Error::Schema {
            record: record.into(),
            field: field.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
