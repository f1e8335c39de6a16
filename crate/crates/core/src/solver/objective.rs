use crate::data::{CovarianceSet, ProjectionState, Study};

/// `c * exp(-eta)`, evaluated in log space once `|eta|` is large enough to
/// overflow `exp`.
pub(crate) fn scaled_variance(c: f64, eta: f64) -> f64 {
    if eta.abs() > 700.0 && c > 0.0 {
        (c.ln() - eta).exp()
    } else {
        c * (-eta).exp()
    }
}

/// `(1/2) sum_i T_i {eta_i + c_i exp(-eta_i)}` for projected variances
/// `c_i` and linear predictors `eta_i`.
pub fn objective_from_projections(projected: &[f64], eta: &[f64], counts: &[usize]) -> f64 {
    0.5 * projected
        .iter()
        .zip(eta)
        .zip(counts)
        .map(|((&c, &e), &t)| t as f64 * (e + scaled_variance(c, e)))
        .sum::<f64>()
}

/// Negative pseudo-log-likelihood of the projected data.
pub fn objective(state: &ProjectionState, covs: &CovarianceSet, study: &Study) -> f64 {
    let eta = state.linear_predictor(&study.design());
    objective_from_projections(
        &covs.projected_variances(&state.gamma),
        eta.as_slice(),
        &covs.weights,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn direct_substitution() {
        assert_relative_eq!(objective_from_projections(&[1.0], &[0.0], &[1]), 0.5);
        assert_relative_eq!(objective_from_projections(&[1.0, 3.0], &[0.0, 0.0], &[1, 1]), 2.0);
    }

    #[test]
    fn large_predictors_do_not_overflow() {
        // exp(710) overflows on its own but 1e-300 * exp(710) does not.
        let r = scaled_variance(1e-300, -710.0);
        assert_relative_eq!(r, (710.0 - 300.0 * 10f64.ln()).exp(), max_relative = 1e-12);
        let r = scaled_variance(1e300, 720.0);
        assert_relative_eq!(r, (300.0 * 10f64.ln() - 720.0).exp(), max_relative = 1e-12);
        let v = objective_from_projections(&[1e-300], &[-710.0], &[2]);
        assert!(v.is_finite());
    }
}
