use thiserror::Error;

/// Errors raised by model construction, samplers and analytics.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("matrix is not symmetric: max |M - M^T| = {max_asymmetry:.3e} exceeds {tolerance:.1e}")]
    NotSymmetric { max_asymmetry: f64, tolerance: f64 },

    #[error("matrix is not positive semi-definite: eigenvalue {min_eigenvalue:.3e} below -{tolerance:.1e}")]
    NotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("{context}: matrix is not positive definite")]
    NotPd { context: &'static str },

    #[error("{context}: matrix is rank deficient ({rows}x{cols}, rank {rank})")]
    RankDeficient {
        context: &'static str,
        rows: usize,
        cols: usize,
        rank: usize,
    },

    #[error("{what} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("{context}: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    DimensionMismatch {
        context: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("insufficient data: usable length {usable} must exceed {required} ({context})")]
    InsufficientData {
        context: &'static str,
        usable: usize,
        required: usize,
    },

    #[error("operation requires a proper prior but sigma_prior is improper")]
    ImproperPrior,

    #[error("non-finite value encountered in {what}")]
    NonFinite { what: &'static str },

    #[error("no cointegration-space restriction configured (Hg absent): tau is fixed at 1")]
    NoRestriction,

    #[error("inverse-Wishart degrees of freedom {dof} too small for dimension {dim} (need dof > dim + 1)")]
    DofTooSmall { dof: usize, dim: usize },

    #[error("chain is empty")]
    EmptyChain,

    #[error("generated process is unstable: companion eigenvalue modulus {max_modulus:.6} exceeds 1")]
    Unstable { max_modulus: f64 },

    #[error("invalid configuration: {message}")]
    InvalidConfig { message: String },

    #[error("sampler failed at iteration {iteration}, step {step}: {source}")]
    ChainAbort {
        iteration: usize,
        step: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
