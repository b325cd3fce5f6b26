use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mode {mode} out of range for an order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("explicit scheme unstable: alpha*dt/dx^2 = {ratio:.6} exceeds 0.25 (alpha = {alpha:e}, dt = {dt:e}, dx = {dx:e})")]
    Unstable {
        ratio: f64,
        alpha: f64,
        dt: f64,
        dx: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed TNSR data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by bad input or environment rather than the
    /// numerics (the CLI maps these to a different exit code).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Format(_)
                | Error::InvalidArgument(_)
                | Error::DimMismatch(_)
                | Error::ModeOutOfRange { .. }
        )
    }
}
