use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("adjacency is not symmetric at ({0}, {1})")]
    NonSymmetric(usize, usize),
    #[error("adjacency has a self loop at node {0}")]
    SelfLoop(usize),
    #[error("adjacency entry ({0}, {1}) is not binary")]
    NonBinary(usize, usize),
    #[error("graph is disconnected (second-smallest Laplacian eigenvalue {0:e})")]
    Disconnected(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("noise requested on a rectangular {rows}x{cols} covariance block")]
    NoiseOnRectangular { rows: usize, cols: usize },
    #[error("dataset has no observed entries")]
    EmptyObservations,
    #[error("factorization failed: {0}")]
    FactorizationFailure(String),
    #[error("mode {mode} {reason}")]
    ModeFilterMismatch { mode: &'static str, reason: &'static str },
    #[error("prediction was built for step {expected}, state is at step {actual}")]
    StaleStep { expected: usize, actual: usize },
    #[error("query time vector is empty")]
    EmptyQuery,
    #[error("query time {query} is not after the last processed time {last}")]
    NonCausalQuery { query: f64, last: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("every hyperparameter candidate failed")]
    AllCandidatesFailed,
    #[error("solver did not converge after {0} iterations")]
    NotConverged(usize),
    #[error("topology is not radial: {0}")]
    NonRadialTopology(String),
    #[error("all targets are below the MAPE threshold")]
    AllTargetsNearZero,
    #[error("cannot partition: {0}")]
    PartitionInfeasible(String),
    #[error("series (task {task}, node {node}) has no observations")]
    EmptySeries { task: usize, node: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
