//! Subject-resampling bootstrap for the regression coefficients.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Study;
use crate::error::{CovcapError, Result};
use crate::solver::{
    fit_beta_fixed_gamma, fit_component, ComponentFit, FitConfig, PreparedStudy, ProjectedStudy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    /// Re-estimate `gamma` in every replicate instead of holding it fixed.
    pub refit_gamma: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 500,
            level: 0.95,
            seed: 0,
            refit_gamma: false,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(CovcapError::InvalidConfig("need at least 2 bootstrap replicates".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CovcapError::InvalidConfig(format!(
                "confidence level must lie in (0, 1), got {}",
                self.level
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapResult {
    /// One row of `beta` per successful replicate.
    #[serde(serialize_with = "ser_rows")]
    pub replicates: DMatrix<f64>,
    #[serde(serialize_with = "ser_vector")]
    pub ci_lower: DVector<f64>,
    #[serde(serialize_with = "ser_vector")]
    pub ci_upper: DVector<f64>,
    pub level: f64,
    pub requested: usize,
    pub failed: usize,
}

impl BootstrapResult {
    pub fn covers(&self, index: usize, value: f64) -> bool {
        self.ci_lower[index] <= value && value <= self.ci_upper[index]
    }
}

fn ser_vector<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

fn ser_rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(m.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()))
}

/// Sample quantile by linear interpolation between order statistics
/// (the "type 7" definition). `sorted` must be ascending and nonempty.
pub fn quantile_type7(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Indices of `n` subjects drawn with replacement for replicate `b`.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Percentile bootstrap for `beta` of a fitted component.
///
/// By default `gamma` stays at `fit.gamma` and each replicate re-runs only
/// the `beta` estimation (with shrinkage re-estimated for the shared
/// shrinkage estimator); with `refit_gamma` every replicate is a full fit.
pub fn bootstrap_beta(
    study: &Study,
    fit: &ComponentFit,
    boot: &BootstrapConfig,
    cfg: &FitConfig,
) -> Result<BootstrapResult> {
    boot.validate()?;
    let cfg = FitConfig {
        estimator: fit.estimator,
        ..cfg.clone()
    };
    if boot.refit_gamma {
        let draws = (0..boot.replicates)
            .into_par_iter()
            .map(|b| {
                let indices = resample_indices(study.n(), boot.seed, b);
                fit_component(&study.resample(&indices), &cfg).map(|f| f.beta)
            })
            .collect();
        summarize(draws, boot)
    } else {
        let prep = PreparedStudy::new(study);
        let proj = ProjectedStudy::new(&prep.sample, &prep.lw, prep.design.clone(), &fit.gamma);
        bootstrap_projected(&proj, boot, &cfg)
    }
}

/// Fixed-`gamma` bootstrap on a study already reduced to projected variances.
pub fn bootstrap_projected(
    proj: &ProjectedStudy,
    boot: &BootstrapConfig,
    cfg: &FitConfig,
) -> Result<BootstrapResult> {
    boot.validate()?;
    let draws = (0..boot.replicates)
        .into_par_iter()
        .map(|b| {
            let indices = resample_indices(proj.n(), boot.seed, b);
            fit_beta_fixed_gamma(&proj.resample(&indices), cfg).map(|f| f.beta)
        })
        .collect();
    summarize(draws, boot)
}

fn summarize(draws: Vec<Result<DVector<f64>>>, boot: &BootstrapConfig) -> Result<BootstrapResult> {
    let total = draws.len();
    let mut rows = Vec::with_capacity(total);
    let mut failed = 0;
    for draw in draws {
        match draw {
            Ok(beta) => rows.push(beta.transpose()),
            Err(e) => {
                warn!("bootstrap replicate dropped: {e}");
                failed += 1;
            }
        }
    }
    if failed * 10 > total || rows.is_empty() {
        return Err(CovcapError::BootstrapFailures { failed, total });
    }
    let replicates = DMatrix::from_rows(&rows);
    let q = replicates.ncols();
    let alpha = (1.0 - boot.level) / 2.0;
    let mut lower = DVector::zeros(q);
    let mut upper = DVector::zeros(q);
    for j in 0..q {
        let mut column: Vec<f64> = replicates.column(j).iter().copied().collect();
        column.sort_by(f64::total_cmp);
        lower[j] = quantile_type7(&column, alpha);
        upper[j] = quantile_type7(&column, 1.0 - alpha);
    }
    Ok(BootstrapResult {
        replicates,
        ci_lower: lower,
        ci_upper: upper,
        level: boot.level,
        requested: total,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectData;
    use crate::solver::Estimator;
    use approx::assert_relative_eq;

    #[test]
    fn type7_matches_hand_values() {
        let xs = [1.0, 2.0, 3.0, 4.0, 10.0];
        assert_relative_eq!(quantile_type7(&xs, 0.0), 1.0);
        assert_relative_eq!(quantile_type7(&xs, 1.0), 10.0);
        assert_relative_eq!(quantile_type7(&xs, 0.5), 3.0);
        // h = 4 * 0.9 = 3.6 -> 4 + 0.6 * 6
        assert_relative_eq!(quantile_type7(&xs, 0.9), 7.6, epsilon = 1e-12);
        assert_relative_eq!(quantile_type7(&[1.0, 2.0], 0.025), 1.025, epsilon = 1e-12);
    }

    #[test]
    fn resampling_is_reproducible_and_in_range() {
        let a = resample_indices(30, 5, 7);
        assert_eq!(a, resample_indices(30, 5, 7));
        assert_ne!(a, resample_indices(30, 5, 8));
        assert!(a.iter().all(|&i| i < 30));
    }

    fn identical_study() -> Study {
        let obs = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -1.0, 0.2, 0.3, -0.7, -0.3, 0.0]);
        let subjects = (0..6)
            .map(|i| SubjectData::new(format!("s{i}"), obs.clone(), DVector::from_vec(vec![1.0])))
            .collect();
        Study::from_subjects(subjects, false).unwrap()
    }

    #[test]
    fn identical_subjects_give_zero_width_interval() {
        let study = identical_study();
        for estimator in [Estimator::LwCap, Estimator::CsCap] {
            let cfg = FitConfig::with_estimator(estimator);
            let fit = fit_component(&study, &cfg).unwrap();
            let boot = BootstrapConfig {
                replicates: 40,
                ..Default::default()
            };
            let result = bootstrap_beta(&study, &fit, &boot, &cfg).unwrap();
            assert_eq!(result.replicates.nrows(), 40);
            assert_relative_eq!(result.ci_lower[0], result.ci_upper[0], epsilon = 1e-9);
            let prep = PreparedStudy::new(&study);
            let proj = ProjectedStudy::new(&prep.sample, &prep.lw, prep.design.clone(), &fit.gamma);
            let point = fit_beta_fixed_gamma(&proj, &cfg).unwrap().beta;
            assert_relative_eq!(result.ci_lower[0], point[0], epsilon = 1e-9);
        }
    }

    #[test]
    fn bounds_are_the_replicate_quantiles() {
        let study = crate::solver::planted_study(30, 3, 12, 17);
        let cfg = FitConfig::with_estimator(Estimator::CsCap);
        let fit = fit_component(&study, &cfg).unwrap();
        let boot = BootstrapConfig {
            replicates: 500,
            level: 0.95,
            seed: 3,
            refit_gamma: false,
        };
        let result = bootstrap_beta(&study, &fit, &boot, &cfg).unwrap();
        assert_eq!(result.replicates.nrows() + result.failed, 500);
        for j in 0..2 {
            assert!(result.ci_lower[j] <= result.ci_upper[j]);
            let mut col: Vec<f64> = result.replicates.column(j).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            assert_eq!(result.ci_lower[j], quantile_type7(&col, 0.025));
            assert_eq!(result.ci_upper[j], quantile_type7(&col, 0.975));
        }
        let again = bootstrap_beta(&study, &fit, &boot, &cfg).unwrap();
        assert_eq!(result.replicates, again.replicates);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let study = identical_study();
        let cfg = FitConfig::with_estimator(Estimator::LwCap);
        let fit = fit_component(&study, &cfg).unwrap();
        for boot in [
            BootstrapConfig { replicates: 1, ..Default::default() },
            BootstrapConfig { level: 1.0, ..Default::default() },
        ] {
            assert!(matches!(
                bootstrap_beta(&study, &fit, &boot, &cfg),
                Err(CovcapError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn degenerate_resamples_are_counted() {
        // Only one subject carries x = 1, so about a third of resamples lose it.
        let study = crate::solver::planted_study(30, 3, 12, 17);
        let mut subjects = study.subjects.clone();
        for (i, s) in subjects.iter_mut().enumerate() {
            s.covariates[1] = if i == 0 { 1.0 } else { 0.0 };
        }
        let study = Study::from_subjects(subjects, false).unwrap();
        let cfg = FitConfig::with_estimator(Estimator::LwCap);
        let fit = fit_component(&study, &cfg).unwrap();
        let boot = BootstrapConfig { replicates: 100, ..Default::default() };
        let err = bootstrap_beta(&study, &fit, &boot, &cfg).unwrap_err();
        assert!(matches!(err, CovcapError::BootstrapFailures { total: 100, .. }));
    }
}
