use thiserror::Error;

/// Errors surfaced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("kernel factorization failed for every jitter in {ladder:?}")]
    Singular { ladder: Vec<f64> },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("oracle would enumerate {required} sequences, cap is {cap}; raise the cap to at least {required}")]
    OracleCap { required: u128, cap: u128 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
            Error::Numeric(_) | Error::Singular { .. } => 3,
            Error::OracleCap { .. } => 4,
            Error::Shape(_) | Error::Domain(_) | Error::State(_) => 1,
        }
    }
}
