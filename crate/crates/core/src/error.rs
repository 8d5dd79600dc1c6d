use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// The variants line up with the exit codes used by the `dscl` binary: see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in `{layer}`: {msg}")]
    Shape { layer: String, msg: String },

    #[error("non-finite value produced by `{op}` in `{layer}`")]
    Numerics { layer: String, op: &'static str },

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("optimizer error: {0}")]
    Optim(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("regularizer state error: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numerics, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format { .. } => 3,
            Error::Numerics { .. } | Error::Divergence(_) => 4,
            _ => 1,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Numerics { .. } => "numerics",
            Error::Divergence(_) => "divergence",
            Error::Tape(_) => "tape",
            Error::Optim(_) => "optim",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Data(_) => "data",
            Error::Format { .. } => "format",
            Error::Eval(_) => "eval",
            Error::Metric(_) => "metric",
            Error::Report(_) => "report",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
