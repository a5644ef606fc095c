use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent. `field` is the
    /// dotted path of the offending entry.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The innovation covariance could not be factorized.
    #[error(
        "numerical failure: {message} (lambda={lambda}, sigma_r={sigma_r}, condition~{condition:e})"
    )]
    Numerical {
        message: String,
        lambda: f64,
        sigma_r: f64,
        condition: f64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    /// Online run aborted; carries the location and the masked parameters at
    /// the time of failure.
    #[error("run aborted at trial {trial}, step {step}: {source}")]
    RunAborted {
        trial: String,
        step: usize,
        theta: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
