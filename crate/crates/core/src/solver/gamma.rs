use nalgebra::{DMatrix, DVector};

use crate::covariance::{pooled_covariance, quad_form, symmetrize};
use crate::data::{canonical_sign, CovarianceSet};
use crate::error::{CovcapError, Result};
use crate::linalg::{eigenvalue_range, smallest_generalized_eigenpair};

/// The `gamma` step for fixed `beta`: the smallest generalized eigenvector
/// of `(A, H)` with `A = sum_i T_i exp(-x_i' beta) Sigma_i` and `H` the
/// pooled covariance, scaled to `gamma' H gamma = 1`.
pub fn update_gamma(
    beta: &DVector<f64>,
    covs: &CovarianceSet,
    design: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let h = pooled_covariance(covs);
    update_gamma_with_eigenvalue(beta, covs, design, &h).map(|(gamma, _)| gamma)
}

/// Same as [`update_gamma`] with a precomputed `H`; also returns the
/// generalized eigenvalue (up to the positive rescaling of `A` used to keep
/// the weights finite).
pub fn update_gamma_with_eigenvalue(
    beta: &DVector<f64>,
    covs: &CovarianceSet,
    design: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<(DVector<f64>, f64)> {
    let (min, max) = eigenvalue_range(h);
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if !(ratio >= 1e-12) {
        return Err(CovcapError::SingularH { ratio });
    }
    let a = weighted_sum(beta, covs, design);
    let (lambda, v) =
        smallest_generalized_eigenpair(&a, h).ok_or(CovcapError::SingularH { ratio })?;
    let scale = quad_form(h, &v).sqrt();
    Ok((canonical_sign(v / scale), lambda))
}

/// `sum_i T_i exp(-eta_i + min_j eta_j) Sigma_i`; the common factor keeps
/// every weight at most `T_i` and does not move the eigenvectors.
pub(crate) fn weighted_sum(
    beta: &DVector<f64>,
    covs: &CovarianceSet,
    design: &DMatrix<f64>,
) -> DMatrix<f64> {
    let eta = design * beta;
    let shift = eta.min();
    let p = covs.dim();
    let mut a = DMatrix::zeros(p, p);
    for ((m, &t), e) in covs.matrices.iter().zip(&covs.weights).zip(eta.iter()) {
        let w = t as f64 * (shift - e).exp();
        a.zip_apply(m, |x, y| *x += w * y);
    }
    symmetrize(&mut a);
    a
}
