use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("class {class} has {count} example(s); clustering needs at least 2")]
    ClassTooSmall { class: i8, count: usize },

    #[error("degenerate clustering in class {class}: all model outputs are identical")]
    DegenerateClustering { class: i8 },

    #[error("trace has {len} rows, need at least {needed}")]
    TraceTooShort { len: usize, needed: usize },

    #[error("training error never decreased; pick the separating iteration manually")]
    NeverDecreased,

    #[error("training-error decrease never slowed below the shrink threshold")]
    NoKnee,

    #[error("Lanczos produced {found} Ritz value(s) but {requested} were requested")]
    KUnreachable { requested: usize, found: usize },

    #[error("outside the small-radius regime: {0}")]
    RegimeViolation(String),

    #[error("alignment never reached {threshold} within {iterations} iterations")]
    NoCrossing { threshold: f64, iterations: usize },

    #[error("recursion did not cross the target within {limit} iterations")]
    NonConvergence { limit: u64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
