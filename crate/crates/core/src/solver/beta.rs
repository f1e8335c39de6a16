use nalgebra::{Cholesky, DMatrix, DVector};

use super::objective::{objective_from_projections, scaled_variance};
use super::FitConfig;
use crate::data::{CovarianceSet, Study};
use crate::error::{CovcapError, Result};

/// Minimizer over `beta` of `(1/2) sum_i T_i {x_i' beta + c_i exp(-x_i' beta)}`.
///
/// Damped Newton with backtracking; the objective is strictly convex when the
/// design has full column rank and every `c_i > 0`. Without a warm start the
/// iteration begins at the intercept-only solution.
pub fn newton_beta(
    projected: &[f64],
    design: &DMatrix<f64>,
    counts: &[usize],
    start: Option<&DVector<f64>>,
    cfg: &FitConfig,
) -> Result<DVector<f64>> {
    let (n, q) = design.shape();
    assert_eq!(projected.len(), n);
    if let Some((index, &value)) = projected
        .iter()
        .enumerate()
        .find(|(_, c)| !(c.is_finite() && **c > 0.0))
    {
        return Err(CovcapError::NonPositiveProjection { index, value });
    }
    check_rank(design)?;

    let weights: Vec<f64> = counts.iter().map(|&t| t as f64).collect();
    let mut beta = match start {
        Some(b) if b.iter().all(|v| v.is_finite()) => b.clone(),
        _ => {
            let total: f64 = weights.iter().sum();
            let pooled = projected.iter().zip(&weights).map(|(c, w)| c * w).sum::<f64>() / total;
            let mut b = DVector::zeros(q);
            b[0] = pooled.ln();
            b
        }
    };

    let eval = |beta: &DVector<f64>| {
        let eta = design * beta;
        objective_from_projections(projected, eta.as_slice(), counts)
    };
    let mut value = eval(&beta);
    let mut gradient_norm = f64::INFINITY;

    for _ in 0..cfg.newton_max_iters {
        let eta = design * &beta;
        let mut gradient = DVector::zeros(q);
        let mut hessian = DMatrix::zeros(q, q);
        for i in 0..n {
            let r = scaled_variance(projected[i], eta[i]);
            let x = design.row(i).transpose();
            gradient.axpy(0.5 * weights[i] * (1.0 - r), &x, 1.0);
            hessian.ger(0.5 * weights[i] * r, &x, &x, 1.0);
        }
        gradient_norm = gradient.norm();
        if gradient_norm <= cfg.newton_tol {
            return Ok(beta);
        }
        let step = match Cholesky::new(hessian) {
            Some(chol) => -chol.solve(&gradient),
            None => return Err(CovcapError::RankDeficientDesign),
        };
        let decrement = -gradient.dot(&step);

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &beta + &step * t;
            let cand_value = eval(&candidate);
            if cand_value.is_finite() && cand_value <= value - 1e-4 * t * decrement {
                beta = candidate;
                value = cand_value;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No representable decrease left: stationary to working precision.
            if decrement <= 1e-13 * (value.abs() + 1.0) {
                return Ok(beta);
            }
            return Err(CovcapError::NewtonDivergence { gradient_norm });
        }
        if decrement <= 1e-15 * (value.abs() + 1.0) {
            return Ok(beta);
        }
    }
    Err(CovcapError::NewtonDivergence { gradient_norm })
}

fn check_rank(design: &DMatrix<f64>) -> Result<()> {
    let (n, q) = design.shape();
    if n < q {
        return Err(CovcapError::RankDeficientDesign);
    }
    let gram = design.tr_mul(design);
    let values = gram.symmetric_eigenvalues();
    let max = values.max();
    let min = values.min();
    if !(max > 0.0 && min > 1e-12 * max) {
        return Err(CovcapError::RankDeficientDesign);
    }
    Ok(())
}

/// The `beta` step for a fixed projection `gamma`.
pub fn update_beta(
    gamma: &DVector<f64>,
    covs: &CovarianceSet,
    study: &Study,
    cfg: &FitConfig,
) -> Result<DVector<f64>> {
    newton_beta(
        &covs.projected_variances(gamma),
        &study.design(),
        &covs.weights,
        None,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn intercept_only_closed_form() {
        let c = [1.0, 2.0, 7.0];
        let t = [2, 5, 3];
        let design = DMatrix::from_element(3, 1, 1.0);
        let beta = newton_beta(&c, &design, &t, None, &FitConfig::default()).unwrap();
        let expected = ((2.0 * 1.0 + 5.0 * 2.0 + 3.0 * 7.0) / 10.0f64).ln();
        assert_relative_eq!(beta[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn saturated_binary_design_recovers_group_means() {
        let c = [1.0, 3.0, 8.0, 4.0, 6.0];
        let t = [2, 2, 1, 3, 4];
        let design = dmatrix![1.0, 0.0; 1.0, 0.0; 1.0, 1.0; 1.0, 1.0; 1.0, 1.0];
        // Start far away so that several damped steps are needed.
        let start = DVector::from_vec(vec![5.0, -4.0]);
        let beta = newton_beta(&c, &design, &t, Some(&start), &FitConfig::default()).unwrap();
        let g0 = (2.0 * 1.0 + 2.0 * 3.0) / 4.0;
        let g1 = (8.0 + 3.0 * 4.0 + 4.0 * 6.0) / 8.0;
        assert_relative_eq!(beta[0].exp(), g0, epsilon = 1e-10);
        assert_relative_eq!((beta[0] + beta[1]).exp(), g1, epsilon = 1e-10);
    }

    #[test]
    fn returned_beta_is_a_local_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let design = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..4.0)).collect();
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(3..20)).collect();
        let beta = newton_beta(&c, &design, &t, None, &FitConfig::default()).unwrap();
        let f = |b: &DVector<f64>| objective_from_projections(&c, (&design * b).as_slice(), &t);
        let best = f(&beta);
        for _ in 0..20 {
            let mut eps = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            eps *= 1e-3 / eps.norm();
            assert!(f(&(&beta + eps)) > best);
        }
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let design = dmatrix![1.0, 2.0; 1.0, 2.0; 1.0, 2.0];
        let err = newton_beta(&[1.0, 2.0, 3.0], &design, &[1, 1, 1], None, &FitConfig::default())
            .unwrap_err();
        assert!(matches!(err, CovcapError::RankDeficientDesign));
    }

    #[test]
    fn zero_projection_is_rejected() {
        let design = DMatrix::from_element(2, 1, 1.0);
        let err =
            newton_beta(&[0.0, 1.0], &design, &[1, 1], None, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, CovcapError::NonPositiveProjection { index: 0, .. }));
    }
}
