use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller broke a documented precondition (dimension mismatch, empty
    /// input, out-of-range parameter, unknown label).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The symmetric eigensolver did not converge.
    #[error("eigendecomposition failed for {n}x{n} matrix (frobenius norm {frobenius:.3e}, max asymmetry {max_asymmetry:.3e}, non-finite entries {non_finite})")]
    Eigen {
        n: usize,
        frobenius: f64,
        max_asymmetry: f64,
        non_finite: usize,
    },

    /// A noise schedule produced a negative radicand in the reverse step.
    #[error("schedule invariant violated at t={t}: 1 - xi[t-1] - sigma[t]^2 = {radicand:.3e}")]
    Schedule { t: usize, radicand: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
