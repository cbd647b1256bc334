use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid needs {states} states but the memory budget allows {budget}")]
    Budget { states: u128, budget: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("constraint violation: {0}")]
    Constraint(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("density integrates to {integral}, expected 1 within {tol:e}")]
    Normalization { integral: f64, tol: f64 },

    #[error("negative or non-finite value {value} at flat index {index}")]
    Negative { index: usize, value: f64 },

    #[error(
        "coincident particles carry mass {mass:e} but the cost has no coincidence cap; \
         set cost.cap.scale (e.g. 0.5) so coincident nodes are valued at m(scale*h)"
    )]
    CoincidenceCap { mass: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("hypothesis failed: {0}")]
    Hypothesis(String),

    #[error("cutoff degeneracy at flat index {index}: 1 - eta1 - eta2 vanishes with nonzero gradient")]
    CutoffDegeneracy { index: usize },

    #[error("eigen iteration stagnated after {iterations} iterations (relative residual {residual:e})")]
    EigenStagnation { iterations: usize, residual: f64 },

    #[error("no qualifying point found: {0}")]
    NotFound(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
