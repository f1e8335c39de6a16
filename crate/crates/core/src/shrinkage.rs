//! Linear shrinkage estimators of the form `a * I + b * S_i`.
//!
//! Three flavours live here:
//!
//! * the covariate-dependent estimator with coefficients shared by all
//!   subjects, `S_i* = (psi2/delta2) mu I + (phi2/delta2) S_i`, where the
//!   target `mu` and the weights depend on the current `(gamma, beta)`;
//! * the per-subject Ledoit-Wolf estimator, shrinking each `S_i` towards
//!   `trace(S_i)/p * I` with its own intensity;
//! * the least-squares optimal pair `(rho1, rho2)` for `rho1 I + rho2 S_i`
//!   on a fixed dataset, used as an oracle for the shared estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{quad_form, sample_covariance, symmetrize};
use crate::data::{CovarianceKind, CovarianceSet, ProjectionState, Study, SubjectData};
use crate::error::{CovcapError, Result};

/// How the per-subject `phi_i^2` reacts to clipping `psi_i^2` at `delta_i^2`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiVariant {
    /// `phi_i^2 = delta_i^2 - min(psi_i^2, delta_i^2)`; weights always convex.
    #[default]
    Clipped,
    /// `phi_i^2 = delta_i^2 - psi_i^2`, which can go negative.
    Unclipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubjectShrinkage {
    pub delta2: f64,
    /// `psi_i^2` before clipping.
    pub psi2_raw: f64,
    /// `min(psi_i^2, delta_i^2)`.
    pub psi2: f64,
    pub phi2: f64,
}

/// Target `mu` and the aggregate quantities that set the shared weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShrinkageParams {
    pub mu: f64,
    pub delta2: f64,
    pub psi2: f64,
    pub phi2: f64,
    pub per_subject: Vec<SubjectShrinkage>,
}

impl ShrinkageParams {
    /// Parameters that leave every matrix untouched (weight on `mu I` is 0).
    pub fn no_shrinkage(mu: f64, n: usize) -> Self {
        Self {
            mu,
            delta2: 0.0,
            psi2: 0.0,
            phi2: 0.0,
            per_subject: vec![
                SubjectShrinkage {
                    delta2: 0.0,
                    psi2_raw: 0.0,
                    psi2: 0.0,
                    phi2: 0.0
                };
                n
            ],
        }
    }

    /// Weight on the target, `psi2 / delta2` (0 when degenerate).
    pub fn shrink_weight(&self) -> f64 {
        if self.delta2 > 0.0 {
            self.psi2 / self.delta2
        } else {
            0.0
        }
    }

    /// Weight on the sample covariance, `phi2 / delta2` (1 when degenerate).
    pub fn keep_weight(&self) -> f64 {
        if self.delta2 > 0.0 {
            self.phi2 / self.delta2
        } else {
            1.0
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.delta2 <= 0.0
    }

    /// Projected variance of the shrunk matrix, `gamma' S_i* gamma`, given
    /// `gamma' S_i gamma` and `gamma' gamma`.
    pub fn shrunk_projection(&self, projected: f64, gamma_norm2: f64) -> f64 {
        self.shrink_weight() * self.mu * gamma_norm2 + self.keep_weight() * projected
    }
}

/// Shared shrinkage parameters from projected sample variances.
///
/// `projected[i] = gamma' S_i gamma`, `expected[i] = exp(x_i' beta)`.
/// Returns [`CovcapError::DegenerateShrinkage`] when `delta2 == 0`.
pub fn shrinkage_from_projections(
    projected: &[f64],
    expected: &[f64],
    counts: &[usize],
    gamma_norm2: f64,
    variant: PhiVariant,
) -> Result<ShrinkageParams> {
    let n = projected.len();
    assert!(n > 0 && expected.len() == n && counts.len() == n);
    let mu = expected.iter().sum::<f64>() / (n as f64 * gamma_norm2);
    let target = mu * gamma_norm2;

    let per_subject: Vec<SubjectShrinkage> = projected
        .iter()
        .zip(expected)
        .zip(counts)
        .map(|((&c, &e), &t)| {
            let delta2 = (c - target).powi(2);
            let psi2_raw = (c - e).powi(2) / t as f64;
            let psi2 = psi2_raw.min(delta2);
            let phi2 = match variant {
                PhiVariant::Clipped => delta2 - psi2,
                PhiVariant::Unclipped => delta2 - psi2_raw,
            };
            SubjectShrinkage {
                delta2,
                psi2_raw,
                psi2,
                phi2,
            }
        })
        .collect();

    let mean = |f: fn(&SubjectShrinkage) -> f64| per_subject.iter().map(f).sum::<f64>() / n as f64;
    let delta2 = mean(|s| s.delta2);
    let psi2 = mean(|s| s.psi2);
    let phi2 = match variant {
        // Summing phi_i^2 directly would reintroduce rounding; the clipped
        // definition makes phi2 = delta2 - psi2 an identity.
        PhiVariant::Clipped => delta2 - psi2,
        PhiVariant::Unclipped => mean(|s| s.phi2),
    };
    if !(delta2 > 0.0) {
        return Err(CovcapError::DegenerateShrinkage);
    }
    Ok(ShrinkageParams {
        mu,
        delta2,
        psi2,
        phi2,
        per_subject,
    })
}

/// Shared shrinkage parameters at the current `(gamma, beta)` from the
/// sample covariance set.
pub fn estimate_shrinkage_params(
    state: &ProjectionState,
    covs: &CovarianceSet,
    study: &Study,
) -> Result<ShrinkageParams> {
    estimate_shrinkage_params_with(state, covs, study, PhiVariant::Clipped)
}

pub fn estimate_shrinkage_params_with(
    state: &ProjectionState,
    covs: &CovarianceSet,
    study: &Study,
    variant: PhiVariant,
) -> Result<ShrinkageParams> {
    if covs.kind != CovarianceKind::Sample {
        return Err(CovcapError::InvalidConfig(
            "shrinkage parameters must be estimated from sample covariances".into(),
        ));
    }
    let gamma_norm2 = state.gamma.norm_squared();
    if gamma_norm2 == 0.0 {
        return Err(CovcapError::InvalidConfig("gamma must be nonzero".into()));
    }
    let projected = covs.projected_variances(&state.gamma);
    let expected: Vec<f64> = state
        .linear_predictor(&study.design())
        .iter()
        .map(|eta| eta.exp())
        .collect();
    shrinkage_from_projections(&projected, &expected, &covs.weights, gamma_norm2, variant)
}

/// `S_i* = (psi2/delta2) mu I + (phi2/delta2) S_i` for every subject.
pub fn cs_shrink(covs: &CovarianceSet, params: &ShrinkageParams) -> CovarianceSet {
    let shift = params.shrink_weight() * params.mu;
    let keep = params.keep_weight();
    let matrices = covs
        .matrices
        .iter()
        .map(|s| {
            let mut out = s * keep;
            for j in 0..out.nrows() {
                out[(j, j)] += shift;
            }
            symmetrize(&mut out);
            out
        })
        .collect();
    CovarianceSet {
        matrices,
        weights: covs.weights.clone(),
        kind: CovarianceKind::CovariateShrunk,
    }
}

/// Expectations of a subject's projected sample variance, used to evaluate
/// the population form of the shared shrinkage weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedMoments {
    /// `exp(x_i' beta)`.
    pub expected: f64,
    /// `E[gamma' S_i gamma]`.
    pub mean: f64,
    /// `E[(gamma' S_i gamma)^2]`.
    pub second_moment: f64,
}

/// Minimizer of the expected squared loss
/// `(1/n) sum_i E{gamma' (rho mu I + (1 - rho) S_i) gamma - exp(x_i' beta)}^2`
/// over `(mu, rho)`, written in the `(mu, phi2, psi2, delta2)` form.
pub fn population_shrinkage(moments: &[ProjectedMoments], gamma_norm2: f64) -> ShrinkageParams {
    let n = moments.len() as f64;
    let mu = moments.iter().map(|m| m.expected).sum::<f64>() / (n * gamma_norm2);
    let target = mu * gamma_norm2;
    let per_subject: Vec<SubjectShrinkage> = moments
        .iter()
        .map(|m| {
            let psi2 = m.second_moment - 2.0 * m.expected * m.mean + m.expected.powi(2);
            let delta2 = m.second_moment - 2.0 * target * m.mean + target.powi(2);
            let phi2 = (target - m.expected).powi(2);
            SubjectShrinkage {
                delta2,
                psi2_raw: psi2,
                psi2,
                phi2,
            }
        })
        .collect();
    let phi2 = per_subject.iter().map(|s| s.phi2).sum::<f64>() / n;
    let psi2 = per_subject.iter().map(|s| s.psi2).sum::<f64>() / n;
    ShrinkageParams {
        mu,
        // The minimizing rho is psi2 / (phi2 + psi2); with exact moments
        // this denominator equals the mean of delta_i^2.
        delta2: phi2 + psi2,
        psi2,
        phi2,
        per_subject,
    }
}

/// Ledoit-Wolf estimate for one subject.
#[derive(Debug, Clone)]
pub struct LedoitWolf {
    pub covariance: DMatrix<f64>,
    /// `m = trace(S) / p`.
    pub target_scale: f64,
    /// Weight on `m I`, `b^2 / d^2`.
    pub shrinkage: f64,
}

/// Optimal single-matrix linear shrinkage towards `trace(S)/p * I` under the
/// normalized Frobenius inner product `<A, B> = trace(A B') / p`.
///
/// A spherical `S` (`d^2 = 0`) is returned unchanged with zero shrinkage.
pub fn lw_shrink(subject: &SubjectData) -> LedoitWolf {
    let y = &subject.observations;
    let (t, p) = (y.nrows() as f64, y.ncols() as f64);
    let s = sample_covariance(subject);
    let m = s.trace() / p;
    let s_norm2 = s.norm_squared() / p;
    let d2 = (s_norm2 - m * m).max(0.0);
    if d2 <= f64::EPSILON * m * m {
        log::debug!("subject `{}`: sample covariance is spherical", subject.id);
        return LedoitWolf {
            covariance: s,
            target_scale: m,
            shrinkage: 0.0,
        };
    }
    // ||y y' - S||^2 = (y'y)^2 - 2 y'Sy + ||S||^2, all normalized by p.
    let mut b_bar2 = 0.0;
    for row in y.row_iter() {
        let v: DVector<f64> = row.transpose();
        let yy = v.norm_squared();
        b_bar2 += (yy * yy - 2.0 * quad_form(&s, &v)) / p + s_norm2;
    }
    b_bar2 /= t * t;
    let b2 = b_bar2.min(d2);
    let shrinkage = b2 / d2;
    let mut covariance = &s * ((d2 - b2) / d2);
    for j in 0..covariance.nrows() {
        covariance[(j, j)] += shrinkage * m;
    }
    symmetrize(&mut covariance);
    LedoitWolf {
        covariance,
        target_scale: m,
        shrinkage,
    }
}

pub fn lw_covariances(study: &Study) -> CovarianceSet {
    CovarianceSet {
        matrices: study
            .subjects
            .iter()
            .map(|s| lw_shrink(s).covariance)
            .collect(),
        weights: study.observation_counts(),
        kind: CovarianceKind::LedoitWolf,
    }
}

/// Coefficients of `rho1 I + rho2 S_i` minimizing the average squared loss
/// `(1/n) sum_i {gamma'(rho1 I + rho2 S_i) gamma - exp(x_i' beta)}^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleCombination {
    pub rho1: f64,
    pub rho2: f64,
}

pub fn oracle_combination(
    state: &ProjectionState,
    covs: &CovarianceSet,
    study: &Study,
) -> Result<OracleCombination> {
    let projected = covs.projected_variances(&state.gamma);
    let expected: Vec<f64> = state
        .linear_predictor(&study.design())
        .iter()
        .map(|eta| eta.exp())
        .collect();
    oracle_from_projections(&projected, &expected, state.gamma.norm_squared())
}

pub fn oracle_from_projections(
    projected: &[f64],
    expected: &[f64],
    gamma_norm2: f64,
) -> Result<OracleCombination> {
    let n = projected.len() as f64;
    let mean_c = projected.iter().sum::<f64>() / n;
    let mean_e = expected.iter().sum::<f64>() / n;
    let mean_ce = projected.iter().zip(expected).map(|(c, e)| c * e).sum::<f64>() / n;
    let mean_cc = projected.iter().map(|c| c * c).sum::<f64>() / n;
    // Centered form of the spread avoids cancellation in mean_cc - mean_c^2.
    let spread = projected.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / n;
    if !(spread > 1e-14 * mean_cc) {
        return Err(CovcapError::SingularDesign { spread });
    }
    let cov_ce = projected
        .iter()
        .zip(expected)
        .map(|(c, e)| (c - mean_c) * (e - mean_e))
        .sum::<f64>()
        / n;
    debug_assert!((cov_ce - (mean_ce - mean_c * mean_e)).abs() <= 1e-6 * mean_ce.abs().max(1.0));
    let rho2 = cov_ce / spread;
    let rho1 = (mean_e - rho2 * mean_c) / gamma_norm2;
    Ok(OracleCombination { rho1, rho2 })
}

/// Average squared loss of `rho1 I + rho2 S_i` in the projected space.
pub fn combination_loss(
    projected: &[f64],
    expected: &[f64],
    gamma_norm2: f64,
    rho1: f64,
    rho2: f64,
) -> f64 {
    projected
        .iter()
        .zip(expected)
        .map(|(c, e)| (rho1 * gamma_norm2 + rho2 * c - e).powi(2))
        .sum::<f64>()
        / projected.len() as f64
}
