use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("collision at t={time:.3}s, position [{x:.3}, {y:.3}, {z:.3}]")]
    Collision { time: f64, x: f64, y: f64, z: f64 },

    /// The tree has no executable child and sampling kept failing.
    #[error("planner tree exhausted after {attempts} failed expansion attempts")]
    ExhaustedTree { attempts: usize },

    #[error("node {0} is not in the tree")]
    UnknownNode(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
