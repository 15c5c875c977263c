use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("hidden state {0} is not one of 0, 1, 2")]
    InvalidState(i64),

    #[error(
        "invalid probability vector {0:?}: components must be finite, non-negative and sum to 1"
    )]
    InvalidBelief([f64; 3]),

    #[error("all components are zero after weighting; the update collapsed numerically")]
    AllZero,

    #[error("invalid transition rates: {0}")]
    InvalidRates(String),

    #[error("invalid photon count model: {0}")]
    InvalidPhotonModel(String),

    #[error("invalid pulse: {0}")]
    InvalidPulse(String),

    #[error("invalid simulation config: {0}")]
    InvalidSimConfig(String),

    #[error(
        "linearized propagation is not valid: max exit rate {max_rate} s^-1 times bin time {dt} s = {product} (must be < {limit})"
    )]
    GuardViolated {
        max_rate: f64,
        dt: f64,
        product: f64,
        limit: f64,
    },

    #[error("matrix is not column-stochastic (column {column} sums to {sum})")]
    NotStochastic { column: usize, sum: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid needs {cells} cells, more than the cap of {cap}")]
    CapExceeded { cells: usize, cap: usize },

    #[error("marginal mean of {rate} is zero while its rms is positive")]
    ZeroMean { rate: &'static str },

    #[error("no data to aggregate")]
    Empty,

    #[error("target state never dominated the belief, no dwell episodes")]
    NoEpisodes,

    #[error("trace {trace} never reached target dominance")]
    NeverReached { trace: usize },

    #[error("invalid control policy: {0}")]
    InvalidPolicy(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("trace format error at line {line}: {message}")]
    TraceFormat { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
