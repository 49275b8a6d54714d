use thiserror::Error;

use crate::Field;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("size mismatch for `{what}`: expected {expected}, got {got}")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index out of range for `{what}`: {index} (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// The penalty continuation ended with the constraint still violated.
    #[error("penalty continuation did not reach the feasibility tolerance: final violation {violation:.3e}")]
    PenaltyNotConverged {
        violation: f64,
        history: Vec<f64>,
    },

    /// Picard iteration hit its cap; `best` is the iterate with the smallest increment.
    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    FixedPointNotConverged {
        iterations: usize,
        residual: f64,
        best: Field,
    },

    #[error("time step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("forward model blew up at step {step} (norm {norm:.3e}); reduce the time step or use the semi-implicit scheme")]
    Unstable { step: usize, norm: f64 },

    #[error("newton iteration for the implicit step {step} failed to converge (residual {residual:.3e})")]
    NewtonFailed { step: usize, residual: f64 },

    #[error("trajectory was not produced by the matching forward model: {0}")]
    ModelMismatch(String),
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::SizeMismatch {
            what,
            expected,
            got,
        })
    }
}
