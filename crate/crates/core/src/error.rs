use thiserror::Error;

/// Errors raised by the numerical kernels, the accountant and the trainer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("undefined value: {0}")]
    Undefined(String),

    #[error("unsupported Renyi order {0}: subsampled bound requires an integer order >= 2")]
    UnsupportedOrder(f64),

    #[error(
        "epsilon {epsilon} exceeds the closed-form regime 2*log(1/delta) = {limit}; use the searched calibration instead"
    )]
    OutOfRegime { epsilon: f64, limit: f64 },

    #[error("noise calibration failed: {0}")]
    Calibration(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
