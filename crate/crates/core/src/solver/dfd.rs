use nalgebra::DMatrix;

use crate::data::CovarianceSet;
use crate::error::{CovcapError, Result};
use crate::linalg::log_det_spd;

/// Average deviation from diagonality of `Gamma' Sigma_i Gamma`:
/// `prod_i (det diag(M_i) / det M_i)^(T_i / N)`, computed on the log scale.
///
/// Equals 1 when every projected matrix is diagonal and exceeds 1 otherwise.
pub fn dfd(gammas: &DMatrix<f64>, covs: &CovarianceSet) -> Result<f64> {
    let total: usize = covs.weights.iter().sum();
    let mut log_value = 0.0;
    for (index, (sigma, &t)) in covs.matrices.iter().zip(&covs.weights).enumerate() {
        let projected = gammas.transpose() * sigma * gammas;
        let diag = projected.diagonal();
        if diag.iter().any(|d| !(*d > 0.0)) {
            return Err(CovcapError::SingularProjection { index });
        }
        let log_diag: f64 = diag.iter().map(|d| d.ln()).sum();
        let log_det = log_det_spd(&projected).ok_or(CovcapError::SingularProjection { index })?;
        log_value += t as f64 / total as f64 * (log_diag - log_det);
    }
    Ok(log_value.exp())
}
