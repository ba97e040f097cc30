//! Sparse Bayesian linear regression with structured nuisance parameters.
//!
//! Observations come in independent groups `Y_i = X_i θ + ξ_{η,i} + ε_i` with
//! `ε_i ~ N(0, Δ_{η,i})`. The crate provides the model families, spike-and-slab
//! priors, exact and MCMC posteriors, the Gaussian-mixture approximation of the
//! posterior, closed-form Gaussian divergences, design diagnostics, and a
//! reproducible simulation harness.

pub mod bvm;
pub mod diagnostics;
pub mod divergences;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod posterior;
pub mod priors;
pub mod rng;
pub mod splines;
pub mod verify;
pub mod zoo;

pub use error::{Error, Result};
pub use model::{GroupedDataset, NuisanceState, SparseVector};
