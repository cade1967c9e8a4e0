use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("invalid {field}: {msg}")]
    Invalid { field: String, msg: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular within-class scatter: {0}")]
    Singular(String),

    #[error("missing feature files for {} (model, task) pair(s): {}", .0.len(), fmt_pairs(.0))]
    MissingFeatures(Vec<(String, String)>),

    #[error("artifact digest mismatch: {0}")]
    Digest(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

fn fmt_pairs(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(m, t)| format!("({m}, {t})"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub fn invalid(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn parse(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Errors caused by bad user input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_validation();
        }
        matches!(
            self,
            Error::Parse { .. }
                | Error::Invalid { .. }
                | Error::Dimension(_)
                | Error::Digest(_)
                | Error::Json(_)
                | Error::MissingFeatures(_)
        )
    }
}
