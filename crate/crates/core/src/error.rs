use thiserror::Error;

/// Errors raised anywhere in the shaping pipeline.
#[derive(Debug, Error)]
pub enum ItersError {
    /// An argument violated an operation's precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// A rule could not be satisfied within the sampling budget.
    #[error("augmentation failed for rule `{rule}`: {reason}")]
    Augmentation { rule: String, reason: String },

    /// A learner produced a non-finite loss or similar numeric failure.
    #[error("training error: {0}")]
    Training(String),

    /// A configuration field failed validation.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Wraps any failure inside an ITERS iteration with its index.
    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<ItersError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serialization(String),
}

impl ItersError {
    pub fn domain(msg: impl Into<String>) -> Self {
        Self::Domain(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<serde_json::Error> for ItersError {
    fn from(e: serde_json::Error) -> Self {
        Self::Serialization(e.to_string())
    }
}

impl From<bincode::Error> for ItersError {
    fn from(e: bincode::Error) -> Self {
        Self::Serialization(e.to_string())
    }
}

impl From<csv::Error> for ItersError {
    fn from(e: csv::Error) -> Self {
        Self::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ItersError>;
