//! Alternating estimation of `(gamma, beta)` in the log-linear covariance
//! model `log(gamma' Sigma_i gamma) = x_i' beta`.
//!
//! Each outer iteration refreshes the covariance estimates (shared shrinkage
//! only), then takes an exact Newton solve in `beta` and an exact
//! generalized-eigenvector solve in `gamma` under `gamma' H gamma = 1`.

mod beta;
mod components;
mod dfd;
mod fit;
mod gamma;
mod objective;
mod projected;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CovcapError, Result};
use crate::shrinkage::PhiVariant;

pub use beta::{newton_beta, update_beta};
pub use components::{fit_components, ComponentSet};
pub use dfd::dfd;
pub use fit::{
    fit_component, fit_component_observed, fit_prepared, working_covariances, ComponentFit,
    IterationSnapshot, PreparedStudy,
};
pub use gamma::{update_gamma, update_gamma_with_eigenvalue};
pub use objective::{objective, objective_from_projections};
#[cfg(test)]
pub(crate) use fit::tests::planted_study;
pub use projected::{fit_beta_fixed_gamma, ProjectedFit, ProjectedStudy};

/// Which covariance estimate stands in for `Sigma_i` in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Sample covariances; requires `T_min > p`.
    Cap,
    /// Per-subject Ledoit-Wolf shrinkage.
    LwCap,
    /// Shared covariate-dependent shrinkage, re-estimated every iteration.
    CsCap,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::Cap => "CAP",
            Estimator::LwCap => "LW-CAP",
            Estimator::CsCap => "CS-CAP",
        }
    }
}

impl FromStr for Estimator {
    type Err = CovcapError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cap" => Ok(Estimator::Cap),
            "lw-cap" => Ok(Estimator::LwCap),
            "cs-cap" => Ok(Estimator::CsCap),
            _ => Err(CovcapError::InvalidConfig(format!(
                "unknown estimator `{s}` (expected cap, lw-cap or cs-cap)"
            ))),
        }
    }
}

/// Orthogonality used when extracting higher-order components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeflationMetric {
    /// New components are Euclidean-orthogonal to earlier ones.
    #[default]
    Euclidean,
    /// New components satisfy `gamma_new' H gamma_old = 0`.
    Constraint,
}

impl FromStr for DeflationMetric {
    type Err = CovcapError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(DeflationMetric::Euclidean),
            "constraint" => Ok(DeflationMetric::Constraint),
            _ => Err(CovcapError::InvalidConfig(format!(
                "unknown deflation metric `{s}` (expected euclidean or constraint)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_outer_iters: usize,
    pub objective_rel_tol: f64,
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    /// Number of starts; `None` means `min(p, 20)`.
    pub n_inits: Option<usize>,
    pub estimator: Estimator,
    pub seed: u64,
    pub deflation: DeflationMetric,
    pub phi_variant: PhiVariant,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 100,
            objective_rel_tol: 1e-6,
            newton_tol: 1e-8,
            newton_max_iters: 50,
            n_inits: None,
            estimator: Estimator::CsCap,
            seed: 0,
            deflation: DeflationMetric::Euclidean,
            phi_variant: PhiVariant::Clipped,
        }
    }
}

impl FitConfig {
    pub fn with_estimator(estimator: Estimator) -> Self {
        Self {
            estimator,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.objective_rel_tol) || !positive(self.newton_tol) {
            return Err(CovcapError::InvalidConfig("tolerances must be positive".into()));
        }
        if self.max_outer_iters == 0 || self.newton_max_iters == 0 {
            return Err(CovcapError::InvalidConfig("iteration limits must be positive".into()));
        }
        if self.n_inits == Some(0) {
            return Err(CovcapError::InvalidConfig("n_inits must be at least 1".into()));
        }
        Ok(())
    }

    pub fn inits_for(&self, p: usize) -> usize {
        self.n_inits.unwrap_or_else(|| p.min(20))
    }
}
