//! Stochastic complexity of path-differentiable estimators.
//!
//! The normalized maximum likelihood complexity of an estimator `theta_hat` is written as an
//! integral over parameter space of level-set densities
//! `f(theta') = int_{theta_hat = theta'} p(x | theta0) / J(x) dH`, where
//! `J = sqrt(det(G G^T))` comes from a conservative Jacobian `G` of the estimator.
//! This crate provides the Jacobian oracles, the projection onto level sets, a
//! projection-based Metropolis-Hastings sampler on those sets, and the density and
//! complexity estimators built on top of them.

pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod model;
pub mod nml;
pub mod oracle;
pub mod projection;
pub mod sampler;

pub use error::{Error, Result};
