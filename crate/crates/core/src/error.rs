use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss was not recorded on an active tape")]
    NotOnTape,
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("layer used before initialization: {0}")]
    Uninitialized(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("target log-density is -inf at {point:?}")]
    OutsideSupport { point: Vec<f64> },
    #[error("ill-posed objective: {0}")]
    IllPosed(String),
    #[error("training aborted: {0}")]
    TrainingAborted(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short category used in CLI error messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::IllPosed(_) => "config",
            Error::Io(_) | Error::Json(_) | Error::Manifest(_) => "io",
            Error::TrainingAborted(_) => "training",
            _ => "numerics",
        }
    }

    /// Process exit status for the category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "training" => 4,
            _ => 5,
        }
    }
}
