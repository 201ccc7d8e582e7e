use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("linkage error: {0}")]
    Linkage(String),

    #[error("design error: {0}")]
    Design(String),

    #[error("no sample data for domain {domain}")]
    NoData { domain: String },

    #[error("degenerate weights in domain {domain}: estimated domain size is zero")]
    DegenerateWeights { domain: String },

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("complete or quasi-complete separation in logistic fit: {0}")]
    Separation(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("{what} did not converge after {iterations} iterations (last change {last_change:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        last_change: f64,
    },

    #[error("model fit error: {0}")]
    Fit(String),

    #[error("enumeration guard: {0}")]
    Guard(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing upstream artifact {}: run the `{stage}` stage first", path.display())]
    Dependency { path: PathBuf, stage: &'static str },

    #[error("stage `{stage}` failed: {inner}")]
    Stage { stage: &'static str, inner: Box<Error> },
}

impl Error {
    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { inner, .. } => inner.root(),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
