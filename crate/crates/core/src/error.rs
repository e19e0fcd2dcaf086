use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("implicit step failed to converge at t = {t} (residual {residual:e})")]
    ImplicitStep { t: f64, residual: f64 },

    #[error("no convergence after {iterations} iterations (last change {change:e})")]
    NoConvergence { iterations: usize, change: f64 },

    #[error("state {z} left the flow table range [{lo}, {hi}] at t = {t}; rebuild the flow on a wider ygrid")]
    FlowRange { z: f64, lo: f64, hi: f64, t: f64 },

    #[error("penalised sequence not monotone in n: Y^{n_lo} exceeds Y^{n_hi} by {excess:e} at t = {t}")]
    NonMonotone { n_lo: u32, n_hi: u32, t: f64, excess: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed CSV input: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
