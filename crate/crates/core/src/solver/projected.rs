use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::beta::newton_beta;
use super::{Estimator, FitConfig};
use crate::data::CovarianceSet;
use crate::error::{CovcapError, Result};
use crate::shrinkage::{shrinkage_from_projections, ShrinkageParams};

/// A study reduced to the scalars a fixed projection `gamma` needs:
/// `gamma' S_i gamma` and `gamma' S_i^LW gamma` per subject.
#[derive(Debug, Clone)]
pub struct ProjectedStudy {
    pub sample: Vec<f64>,
    pub lw: Vec<f64>,
    pub counts: Vec<usize>,
    pub design: DMatrix<f64>,
    pub gamma_norm2: f64,
}

impl ProjectedStudy {
    pub fn new(
        sample: &CovarianceSet,
        lw: &CovarianceSet,
        design: DMatrix<f64>,
        gamma: &DVector<f64>,
    ) -> Self {
        Self {
            sample: sample.projected_variances(gamma),
            lw: lw.projected_variances(gamma),
            counts: sample.weights.clone(),
            design,
            gamma_norm2: gamma.norm_squared(),
        }
    }

    pub fn n(&self) -> usize {
        self.sample.len()
    }

    /// Subjects at `indices`, repetitions allowed.
    pub fn resample(&self, indices: &[usize]) -> Self {
        Self {
            sample: indices.iter().map(|&i| self.sample[i]).collect(),
            lw: indices.iter().map(|&i| self.lw[i]).collect(),
            counts: indices.iter().map(|&i| self.counts[i]).collect(),
            design: self.design.select_rows(indices),
            gamma_norm2: self.gamma_norm2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectedFit {
    #[serde(serialize_with = "crate::solver::components::ser_vector")]
    pub beta: DVector<f64>,
    /// `gamma' Sigma_i gamma` under the estimator's covariance estimate.
    pub fitted: Vec<f64>,
    pub shrinkage: Option<ShrinkageParams>,
    pub iterations: usize,
    pub converged: bool,
}

/// Estimates `beta` with `gamma` held fixed.
///
/// For shared shrinkage this alternates between the shrinkage parameters
/// and the Newton solve until `beta` stops moving, starting from the
/// Ledoit-Wolf solution.
pub fn fit_beta_fixed_gamma(proj: &ProjectedStudy, cfg: &FitConfig) -> Result<ProjectedFit> {
    cfg.validate()?;
    let lw_beta = || newton_beta(&proj.lw, &proj.design, &proj.counts, None, cfg);
    match cfg.estimator {
        Estimator::Cap => Ok(ProjectedFit {
            beta: newton_beta(&proj.sample, &proj.design, &proj.counts, None, cfg)?,
            fitted: proj.sample.clone(),
            shrinkage: None,
            iterations: 1,
            converged: true,
        }),
        Estimator::LwCap => Ok(ProjectedFit {
            beta: lw_beta()?,
            fitted: proj.lw.clone(),
            shrinkage: None,
            iterations: 1,
            converged: true,
        }),
        Estimator::CsCap => {
            let mut beta = lw_beta()?;
            let mut fitted = proj.lw.clone();
            let mut shrinkage = None;
            let mut converged = false;
            let mut iterations = 0;
            for iteration in 1..=cfg.max_outer_iters {
                iterations = iteration;
                let params = params_at(proj, &beta, cfg)?;
                fitted = proj
                    .sample
                    .iter()
                    .map(|&c| params.shrunk_projection(c, proj.gamma_norm2))
                    .collect();
                let next = newton_beta(&fitted, &proj.design, &proj.counts, Some(&beta), cfg)?;
                let step = (&next - &beta).amax();
                beta = next;
                shrinkage = Some(params);
                if step <= cfg.newton_tol.max(1e-12) {
                    converged = true;
                    break;
                }
            }
            Ok(ProjectedFit {
                beta,
                fitted,
                shrinkage,
                iterations,
                converged,
            })
        }
    }
}

fn params_at(proj: &ProjectedStudy, beta: &DVector<f64>, cfg: &FitConfig) -> Result<ShrinkageParams> {
    let expected: Vec<f64> = (&proj.design * beta).iter().map(|e| e.exp()).collect();
    match shrinkage_from_projections(
        &proj.sample,
        &expected,
        &proj.counts,
        proj.gamma_norm2,
        cfg.phi_variant,
    ) {
        Ok(p) => Ok(p),
        Err(CovcapError::DegenerateShrinkage) => {
            log::warn!("shrinkage dispersion is zero; using unshrunk covariances");
            let mu = expected.iter().sum::<f64>() / (expected.len() as f64 * proj.gamma_norm2);
            Ok(ShrinkageParams::no_shrinkage(mu, proj.n()))
        }
        Err(e) => Err(e),
    }
}
