use alloc::string::String;

/// Errors raised by the numerical routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite state on path {path} at step {step}")]
    NonFinite { path: usize, step: usize },
    #[error("ill-conditioned regression at step {step} (condition estimate {cond:e})")]
    IllConditioned { step: usize, cond: f64 },
    #[error("tail tolerance unmet: horizon {t_end} is short, need t_end >= {required}")]
    TailTolerance { required: f64, t_end: f64 },
    #[error("no convergence after {sweeps} sweeps (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
}

pub type Result<T> = core::result::Result<T, Error>;
