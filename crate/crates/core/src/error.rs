use thiserror::Error;

/// Failures of the implicit closure solve and of the quantities derived from it.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClosureError {
    #[error("closure input out of domain: R = {r}, Q = {q} (need R, Q >= 0 and R + Q > 0)")]
    Domain { r: f64, q: f64 },
    #[error("closure solve did not converge in {iterations} iterations; last bracket [{lo}, {hi}]")]
    SolverFailure { iterations: usize, lo: f64, hi: f64 },
    #[error("closure derivative singular at Z = {z}")]
    Singularity { z: f64 },
    #[error("closure invariant violated: {0}")]
    Invariant(String),
}

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Closure(#[from] ClosureError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// The accumulated deformation left the region where `I + k` is safely invertible.
    #[error("smallness budget exceeded: {quantity} = {value:.6e} >= delta = {delta:.6e}")]
    Smallness { quantity: String, value: f64, delta: f64 },
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("coefficient error: {0}")]
    Coefficient(String),
    #[error("linear solver failed: {message} (relative residual {residual:.3e})")]
    Solver { message: String, residual: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("Picard iteration is not contracting (ratios {ratios:?}); try window_T = {suggested_window:.6e}")]
    NonContraction { ratios: Vec<f64>, suggested_window: f64 },
}

impl Error {
    /// Errors that signal a violated mathematical invariant rather than a numerical failure.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            Error::Smallness { .. }
                | Error::Invariant(_)
                | Error::Coefficient(_)
                | Error::Closure(ClosureError::Invariant(_))
                | Error::Closure(ClosureError::Domain { .. })
                | Error::Closure(ClosureError::Singularity { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
