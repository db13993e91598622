use thiserror::Error;

/// Errors raised by the sampling engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected dimension {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("step index {t} out of range 1..={max}")]
    Index { t: usize, max: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate noise at step {t}: standard deviation {std:e} is too small to normalize")]
    DegenerateNoise { t: usize, std: f64 },

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Training { iteration: usize, loss: f64 },

    #[error("invalid concept world at `{path}`: {message}")]
    World { path: String, message: String },

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}
