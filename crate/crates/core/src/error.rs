use std::fmt;

/// Which integrator or estimator blew up, and where.
#[derive(Debug, Clone, PartialEq)]
pub struct BlowUp {
    pub path: Option<usize>,
    pub step: usize,
}

impl fmt::Display for BlowUp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.path {
            Some(p) => write!(f, "path {p}, step {}", self.step),
            None => write!(f, "step {}", self.step),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Domain { name: &'static str, reason: String },

    #[error("non-finite state at {0}")]
    NonFinite(BlowUp),

    #[error("step h = {h} exceeds the stability limit {limit}")]
    Stiffness { h: f64, limit: f64 },

    #[error("time grids differ")]
    GridMismatch,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("x = {x} outside tabulated range [{lo}, {hi}]")]
    InterpolationRange { x: f64, lo: f64, hi: f64 },

    #[error("integrand {value} at truncation time still exceeds tol {tol}")]
    Truncation { value: f64, tol: f64 },

    #[error("finite difference {diff} is below the noise floor (stderr {stderr})")]
    StepTooSmall { diff: f64, stderr: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn domain(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Domain {
            name,
            reason: reason.into(),
        }
    }

    /// Attaches a path index to a blow-up raised inside a single-path routine.
    pub fn at_path(self, index: usize) -> Self {
        match self {
            Error::NonFinite(BlowUp { step, .. }) => Error::NonFinite(BlowUp {
                path: Some(index),
                step,
            }),
            other => other,
        }
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 1.0 && alpha < 2.0 {
        Ok(())
    } else {
        Err(Error::domain("alpha", format!("{alpha} is outside (1, 2)")))
    }
}

pub(crate) fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(name, format!("{v} must be positive and finite")))
    }
}
