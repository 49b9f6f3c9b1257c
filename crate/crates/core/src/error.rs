use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid uncertainty model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Estimated channels are (numerically) linearly dependent.
    #[error("degenerate channels: {0}")]
    DegenerateChannels(String),

    /// The coupling matrix is singular, which happens for near-identical users.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// An iterative stage hit its iteration cap. `last` is the final iterate.
    #[error("{stage} did not converge within {iterations} iterations")]
    Convergence {
        stage: &'static str,
        iterations: usize,
        last: Vec<f64>,
    },

    /// A power-loading fixed point with negative powers. Rescheduling is the remedy.
    #[error("infeasible power loading: negative power for user(s) {users:?}")]
    InfeasibleLoading { users: Vec<usize>, powers: Vec<f64> },

    #[error("malformed document: {0}")]
    Parse(#[from] serde_json::Error),
}
