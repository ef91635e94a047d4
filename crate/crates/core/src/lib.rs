//! Bayesian estimation of cointegrated panel vector error-correction models.
//!
//! The crate fits a panel of `N` individuals, each observing `n` variables,
//! with a vector error-correction model whose long-run multiplier matrices
//! `Pi_i = alpha_i beta_i^T` have per-individual reduced rank `r_i`. Inference
//! runs a Gibbs sampler that alternates between a short-run regression
//! parameterization (sampling adjustment and lag coefficients) and a long-run
//! parameterization (sampling the cointegration-space coordinates), with
//! hierarchical shrinkage on all regression coefficients and an optional
//! projection prior concentrating the cointegration space near a reference
//! subspace.
//!
//! Modules:
//! - [`linalg`]: vectorization, Kronecker products, matrix roots, orthogonal
//!   complements, projection operators.
//! - [`model`]: panel layout, design-matrix assembly for both likelihood
//!   representations, residuals and log-likelihood.
//! - [`priors`]: prior configuration, prior covariance assembly, prior
//!   sampling and density evaluation.
//! - [`gibbs`]: the full-conditional samplers and the chain driver.
//! - [`simulator`]: synthetic panel generation and the accuracy study.
//! - [`analytics`]: FEVD/IRF, information criteria, rank profiling and
//!   convergence diagnostics.

pub mod analytics;
pub(crate) mod dist;
pub mod error;
pub mod gibbs;
pub mod linalg;
pub mod model;
pub mod priors;
pub mod simulator;

pub use error::{Error, Result};
