use thiserror::Error;

/// Errors surfaced by the tensor engine, data pipeline, metrics, and training.
#[derive(Error, Debug)]
pub enum PfError {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("missing entries: {0:?}")]
    Missing(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PfError>;

impl PfError {
    pub fn parse(what: impl Into<String>, detail: impl Into<String>) -> Self {
        PfError::Parse {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// Stable machine-readable error category.
    pub fn kind(&self) -> &'static str {
        match self {
            PfError::Dim(_) => "dimension",
            PfError::Param(_) => "parameter",
            PfError::Config(_) => "config",
            PfError::Contract(_) => "contract",
            PfError::Parse { .. } => "parse",
            PfError::UndefinedMetric(_) => "undefined_metric",
            PfError::Missing(_) => "missing",
            PfError::Io(_) => "io",
            PfError::Json(_) => "json",
        }
    }

    /// Process exit code: 2 for bad arguments/configuration, 1 for
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PfError::Config(_) | PfError::Param(_) => 2,
            _ => 1,
        }
    }
}
