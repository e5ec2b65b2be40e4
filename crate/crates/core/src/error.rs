use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the solver stack can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("hypothesis violated ({hypothesis}): {detail}")]
    Hypothesis {
        hypothesis: &'static str,
        detail: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("potential evaluated at r = {r} outside its domain (bound {bound})")]
    DomainViolation { r: f64, bound: f64 },

    #[error("phase field left the potential domain at step {step}: {value} (bound {bound})")]
    Separation { step: usize, value: f64, bound: f64 },

    #[error("Newton failed at step {step} after {} iterations, residual history {residuals:?}", residuals.len())]
    Newton { step: usize, residuals: Vec<f64> },

    #[error("linear solver did not converge in {iterations} iterations (relative residual {residual:e}){}", at_step(*step))]
    LinearSolver {
        iterations: usize,
        residual: f64,
        step: Option<usize>,
    },

    #[error("unsupported parameter: {0}")]
    Unsupported(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed snapshot {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
}

fn at_step(step: Option<usize>) -> String {
    step.map(|s| format!(" at step {s}")).unwrap_or_default()
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a time index to errors raised inside a single time step.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::LinearSolver {
                iterations,
                residual,
                ..
            } => Error::LinearSolver {
                iterations,
                residual,
                step: Some(step),
            },
            Error::DomainViolation { r, bound } => Error::Separation {
                step,
                value: r,
                bound,
            },
            Error::Separation { value, bound, .. } => Error::Separation { step, value, bound },
            Error::Newton { residuals, .. } => Error::Newton { step, residuals },
            other => other,
        }
    }

    /// True for errors caused by bad input rather than solver trouble.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Hypothesis { .. } | Error::Unsupported(_) | Error::Format { .. }
        )
    }
}
