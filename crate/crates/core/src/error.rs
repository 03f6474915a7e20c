use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Rule/layer pairing or other invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A size cap was exceeded.
    #[error("resource limit: {0}")]
    Resource(String),

    /// Root search ended without reaching the feasible set.
    #[error("root search infeasible after {iterations} iterations (best f = {best_f:e})")]
    Infeasible {
        best_point: Vec<f64>,
        best_f: f64,
        iterations: usize,
    },

    /// Calibration target not reachable inside the search bracket.
    #[error("calibration target {target} unreachable: statistic spans [{low}, {high}] over the bracket")]
    Unreachable { target: f64, low: f64, high: f64 },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<S: Into<String>>(msg: S) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn shape<S: Into<String>>(msg: S) -> Error {
    Error::Shape(msg.into())
}
