use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("duplicate subject id '{0}' in events file")]
    DuplicateEventSubject(String),

    #[error("invalid event record for subject '{subject}': {message}")]
    InvalidEvent { subject: String, message: String },

    #[error("parameters inconsistent with model spec: {0}")]
    DimensionMismatch(String),

    #[error("covariance matrix for class {class} is numerically singular (residual sd too small)")]
    SingularCovariance { class: usize },

    #[error("estimation failed: all {n_starts} starts diverged or hit degenerate parameters")]
    EstimationFailed {
        n_starts: usize,
        diagnostics: Vec<String>,
    },

    #[error("subject '{0}' has no usable measurement in the classification window")]
    EmptyWindow(String),

    #[error("invalid survival sample for subject '{subject}': {message}")]
    InvalidSurvival { subject: String, message: String },

    #[error("covariate '{0}' is constant across all samples")]
    ConstantCovariate(String),

    #[error(
        "monotone partial likelihood on covariate '{0}': the data are separable; \
         a finite hazard ratio does not exist"
    )]
    Separation(String),

    #[error("Cox Newton-Raphson failed: {0}")]
    CoxSolve(String),

    #[error("horizon AUC undefined: {0}")]
    NoComparablePairs(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
