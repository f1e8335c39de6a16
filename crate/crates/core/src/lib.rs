//! Covariate-assisted principal projection estimation.
//!
//! Finds a direction `gamma` and coefficients `beta` such that the variance
//! of the projected data follows `log(gamma' Sigma_i gamma) = x_i' beta`,
//! with the subject covariances estimated by sample covariances, per-subject
//! Ledoit-Wolf shrinkage, or a shrinkage shared across subjects whose
//! weights are chosen along the fitted direction.

pub mod cli;
pub mod covariance;
pub mod data;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod shrinkage;
pub mod simgen;
pub mod solver;

pub use data::{CovarianceKind, CovarianceSet, ProjectionState, Study, SubjectData};
pub use error::{CovcapError, Result};
pub use solver::{fit_component, fit_components, ComponentFit, ComponentSet, Estimator, FitConfig};
