use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("branch error: image {re} + {im}i of the slit map has modulus {modulus} <= 1")]
    Branch { re: f64, im: f64, modulus: f64 },

    #[error("branch error in particle {index}: {source}")]
    ClusterBranch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid measure: {0}")]
    Measure(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("rho0 has not been calibrated for this drift field")]
    Uncalibrated,

    #[error("integrator stalled at t = {t}: step size {step} underflowed")]
    StepUnderflow { t: f64, step: f64 },

    #[error("drift field is numerically zero; no fixed points")]
    DegenerateField,

    #[error("horizon {horizon} exceeds the logarithmic tracking bound {bound}")]
    Horizon { horizon: f64, bound: f64 },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("trajectory {index} failed: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
