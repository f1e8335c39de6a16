//! Simulated studies with a planted log-linear covariate effect on two
//! eigen-directions, and the Monte Carlo harness that scores the estimators
//! on them.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Study, SubjectData};
use crate::error::{CovcapError, Result};
use crate::inference::{bootstrap_projected, BootstrapConfig};
use crate::linalg::orthonormalize;
use crate::shrinkage::cs_shrink;
use crate::solver::{
    fit_beta_fixed_gamma, fit_components, Estimator, FitConfig, PreparedStudy, ProjectedStudy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDesign {
    pub p: usize,
    pub n: usize,
    pub t: usize,
    /// Covariate effect on the first signal direction.
    pub beta1_d2: f64,
    /// Covariate effect on the second signal direction.
    pub beta1_d4: f64,
    /// One-based positions of the two signal directions.
    pub signal_dims: (usize, usize),
    /// Log-scale eigenvalue means run linearly from the first to the second
    /// value across the `p` positions.
    pub mean_range: (f64, f64),
    /// Log-scale standard deviation of the non-signal eigenvalues.
    pub sigma: f64,
    pub center: bool,
    pub seed: u64,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self {
            p: 20,
            n: 50,
            t: 50,
            beta1_d2: -1.0,
            beta1_d4: 1.0,
            signal_dims: (2, 4),
            mean_range: (5.0, -1.0),
            sigma: 0.3,
            center: true,
            seed: 0,
        }
    }
}

impl SimDesign {
    pub fn new(p: usize, n: usize, t: usize, seed: u64) -> Self {
        Self {
            p,
            n,
            t,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.signal_dims;
        if self.p < 5 {
            return Err(CovcapError::InvalidConfig(format!("simulation needs p >= 5, got {}", self.p)));
        }
        if self.n < 2 || self.t < 2 {
            return Err(CovcapError::InvalidConfig("simulation needs n >= 2 and T >= 2".into()));
        }
        if a == b || a == 0 || b == 0 || a > self.p || b > self.p {
            return Err(CovcapError::InvalidConfig("signal dimensions must be distinct positions in 1..=p".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(CovcapError::InvalidConfig("sigma must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Log-scale mean at one-based position `j`.
    pub fn log_mean(&self, j: usize) -> f64 {
        let (start, end) = self.mean_range;
        start + (end - start) * (j - 1) as f64 / (self.p - 1) as f64
    }

    pub fn signal_beta(&self, dim: usize) -> DVector<f64> {
        let slope = if dim == self.signal_dims.0 {
            self.beta1_d2
        } else {
            assert_eq!(dim, self.signal_dims.1, "not a signal dimension");
            self.beta1_d4
        };
        DVector::from_vec(vec![self.log_mean(dim), slope])
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Generating quantities needed to score estimates.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Orthonormal eigenbasis shared by all subjects; column `j - 1` is
    /// direction `j`.
    pub basis: DMatrix<f64>,
    /// Per-subject eigenvalues, in basis order.
    pub eigenvalues: Vec<DVector<f64>>,
    pub covariate: Vec<f64>,
    pub design: SimDesign,
}

impl GroundTruth {
    pub fn direction(&self, dim: usize) -> DVector<f64> {
        self.basis.column(dim - 1).into_owned()
    }

    pub fn eigenvalue(&self, subject: usize, dim: usize) -> f64 {
        self.eigenvalues[subject][dim - 1]
    }

    pub fn beta(&self, dim: usize) -> DVector<f64> {
        self.design.signal_beta(dim)
    }

    /// `Pi Lambda_i Pi'`.
    pub fn covariance(&self, subject: usize) -> DMatrix<f64> {
        let scaled = &self.basis * DMatrix::from_diagonal(&self.eigenvalues[subject]);
        scaled * self.basis.transpose()
    }
}

/// Draws a study from `design`; identical seeds give identical studies.
pub fn generate_study(design: &SimDesign) -> Result<(Study, GroundTruth)> {
    design.validate()?;
    let p = design.p;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let gaussian = DMatrix::<f64>::from_fn(p, p, |_, _| StandardNormal.sample(&mut rng));
    let basis = orthonormalize(&gaussian);
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let (d2, d4) = design.signal_dims;

    let mut subjects = Vec::with_capacity(design.n);
    let mut eigenvalues = Vec::with_capacity(design.n);
    let mut covariate = Vec::with_capacity(design.n);
    for i in 0..design.n {
        let x: f64 = if coin.sample(&mut rng) { 1.0 } else { 0.0 };
        let lambda = DVector::from_fn(p, |row, _| {
            let j = row + 1;
            if j == d2 {
                (design.log_mean(j) + design.beta1_d2 * x).exp()
            } else if j == d4 {
                (design.log_mean(j) + design.beta1_d4 * x).exp()
            } else {
                LogNormal::new(design.log_mean(j), design.sigma)
                    .expect("valid lognormal")
                    .sample(&mut rng)
            }
        });
        let mut z = DMatrix::<f64>::from_fn(design.t, p, |_, _| StandardNormal.sample(&mut rng));
        for (j, mut column) in z.column_iter_mut().enumerate() {
            column *= lambda[j].sqrt();
        }
        let observations = z * basis.transpose();
        subjects.push(SubjectData::new(
            format!("sim{i:04}"),
            observations,
            DVector::from_vec(vec![1.0, x]),
        ));
        eigenvalues.push(lambda);
        covariate.push(x);
    }
    let study = Study::from_subjects(subjects, design.center)?;
    Ok((
        study,
        GroundTruth {
            basis,
            eigenvalues,
            covariate,
            design: design.clone(),
        },
    ))
}

/// `|<a, b>| / (|a| |b|)`.
pub fn similarity(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0)
}

/// Seed of replicate `r` derived from a base seed.
pub fn replicate_seed(seed: u64, r: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64 + 1);
    rng.next_u64()
}

/// One replicate's errors for one signal direction and one estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub dim: usize,
    pub method: Estimator,
    pub beta1: f64,
    pub beta1_true: f64,
    /// Mean over subjects of `lambda_hat - lambda`.
    pub eigen_error: f64,
    /// Mean over subjects of `(lambda_hat - lambda)^2`.
    pub eigen_sq_error: f64,
    pub similarity: f64,
    pub covered: Option<bool>,
}

/// Aggregate of [`ReplicateRecord`]s for one cell of a table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimMetrics {
    pub p: usize,
    pub n: usize,
    pub t: usize,
    pub dim: usize,
    pub method: String,
    pub replicates: usize,
    pub bias_beta1: f64,
    pub mse_beta1: f64,
    pub median_sq_err_beta1: f64,
    pub bias_eigen: f64,
    pub mse_eigen: f64,
    pub median_mse_eigen: f64,
    pub similarity: f64,
    pub similarity_se: f64,
    pub coverage: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    sum / count as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len().is_multiple_of(2) {
        0.5 * (xs[m - 1] + xs[m])
    } else {
        xs[m]
    }
}

/// Aggregates the records of a single `(dim, method)` cell.
pub fn aggregate(design: &SimDesign, records: &[&ReplicateRecord]) -> SimMetrics {
    assert!(!records.is_empty());
    let r = records.len() as f64;
    let err = |rec: &&ReplicateRecord| rec.beta1 - rec.beta1_true;
    let similarity = mean(records.iter().map(|rec| rec.similarity));
    let sim_var = if records.len() > 1 {
        records.iter().map(|rec| (rec.similarity - similarity).powi(2)).sum::<f64>() / (r - 1.0)
    } else {
        0.0
    };
    let covered: Vec<bool> = records.iter().filter_map(|rec| rec.covered).collect();
    SimMetrics {
        p: design.p,
        n: design.n,
        t: design.t,
        dim: records[0].dim,
        method: records[0].method.label().to_string(),
        replicates: records.len(),
        bias_beta1: mean(records.iter().map(err)),
        mse_beta1: mean(records.iter().map(|rec| err(rec).powi(2))),
        median_sq_err_beta1: median(records.iter().map(|rec| err(rec).powi(2)).collect()),
        bias_eigen: mean(records.iter().map(|rec| rec.eigen_error)),
        mse_eigen: mean(records.iter().map(|rec| rec.eigen_sq_error)),
        median_mse_eigen: median(records.iter().map(|rec| rec.eigen_sq_error).collect()),
        similarity,
        similarity_se: (sim_var / r).sqrt(),
        coverage: (!covered.is_empty())
            .then(|| covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64),
    }
}

fn group(design: &SimDesign, records: &[ReplicateRecord], methods: &[Estimator]) -> Vec<SimMetrics> {
    let (d2, d4) = design.signal_dims;
    let mut out = Vec::new();
    for dim in [d2, d4] {
        for &method in methods {
            let cell: Vec<&ReplicateRecord> = records
                .iter()
                .filter(|r| r.dim == dim && r.method == method)
                .collect();
            if !cell.is_empty() {
                out.push(aggregate(design, &cell));
            }
        }
    }
    out
}

fn eigen_errors(estimates: &[f64], truth: &GroundTruth, dim: usize) -> (f64, f64) {
    let errors: Vec<f64> = estimates
        .iter()
        .enumerate()
        .map(|(i, est)| est - truth.eigenvalue(i, dim))
        .collect();
    (
        mean(errors.iter().copied()),
        mean(errors.iter().map(|e| e * e)),
    )
}

/// Per-replicate records with the true directions supplied to every
/// estimator. The sample-covariance estimator is skipped unless `T > p`.
pub fn known_gamma_records(
    design: &SimDesign,
    methods: &[Estimator],
    replicates: usize,
    cfg: &FitConfig,
) -> Result<Vec<ReplicateRecord>> {
    let methods: Vec<Estimator> = methods
        .iter()
        .copied()
        .filter(|&m| m != Estimator::Cap || design.t > design.p)
        .collect();
    let per_replicate = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let (study, truth) = generate_study(&design.with_seed(replicate_seed(design.seed, r)))?;
            let prep = PreparedStudy::new(&study);
            let mut records = Vec::new();
            for dim in [design.signal_dims.0, design.signal_dims.1] {
                let gamma = truth.direction(dim);
                let proj = ProjectedStudy::new(&prep.sample, &prep.lw, prep.design.clone(), &gamma);
                let beta_true = truth.beta(dim);
                for &method in &methods {
                    let fit_cfg = FitConfig { estimator: method, ..cfg.clone() };
                    let fit = fit_beta_fixed_gamma(&proj, &fit_cfg)?;
                    let (eigen_error, eigen_sq_error) = eigen_errors(&fit.fitted, &truth, dim);
                    records.push(ReplicateRecord {
                        replicate: r,
                        dim,
                        method,
                        beta1: fit.beta[1],
                        beta1_true: beta_true[1],
                        eigen_error,
                        eigen_sq_error,
                        similarity: 1.0,
                        covered: None,
                    });
                }
            }
            Ok(records)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_replicate.into_iter().flatten().collect())
}

pub fn run_known_gamma(
    design: &SimDesign,
    methods: &[Estimator],
    replicates: usize,
    cfg: &FitConfig,
) -> Result<Vec<SimMetrics>> {
    let records = known_gamma_records(design, methods, replicates, cfg)?;
    Ok(group(design, &records, methods))
}

/// Known-direction table over a grid of dimensions.
pub fn run_table1(
    ps: &[usize],
    n: usize,
    t: usize,
    replicates: usize,
    seed: u64,
    cfg: &FitConfig,
) -> Result<Vec<SimMetrics>> {
    let methods = [Estimator::LwCap, Estimator::CsCap, Estimator::Cap];
    let mut out = Vec::new();
    for &p in ps {
        out.extend(run_known_gamma(&SimDesign::new(p, n, t, seed), &methods, replicates, cfg)?);
    }
    Ok(out)
}

/// Per-replicate records with directions estimated by a two-component fit.
///
/// The two fitted components are matched to the two signal directions by
/// the assignment with the larger total similarity. With `bootstrap`, each
/// record also reports whether the fixed-direction bootstrap interval for
/// the covariate coefficient contains the truth.
pub fn unknown_gamma_records(
    design: &SimDesign,
    methods: &[Estimator],
    replicates: usize,
    bootstrap: Option<&BootstrapConfig>,
    cfg: &FitConfig,
) -> Result<Vec<ReplicateRecord>> {
    let per_replicate = (0..replicates)
        .into_par_iter()
        .map(|r| unknown_gamma_replicate(design, methods, r, bootstrap, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_replicate.into_iter().flatten().collect())
}

fn unknown_gamma_replicate(
    design: &SimDesign,
    methods: &[Estimator],
    r: usize,
    bootstrap: Option<&BootstrapConfig>,
    cfg: &FitConfig,
) -> Result<Vec<ReplicateRecord>> {
    let seed = replicate_seed(design.seed, r);
    let (study, truth) = generate_study(&design.with_seed(seed))?;
    let prep = PreparedStudy::new(&study);
    let dims = [design.signal_dims.0, design.signal_dims.1];
    let mut records = Vec::new();
    for &method in methods {
        let fit_cfg = FitConfig { estimator: method, seed, ..cfg.clone() };
        let set = fit_components(&study, 2, &fit_cfg)?;
        let sims = |c: usize, d: usize| similarity(&set.components[c].gamma, &truth.direction(d));
        let swap = sims(0, dims[1]) + sims(1, dims[0]) > sims(0, dims[0]) + sims(1, dims[1]);
        for (slot, &dim) in dims.iter().enumerate() {
            let component = &set.components[if swap { 1 - slot } else { slot }];
            let unit = &component.gamma / component.gamma.norm();
            let covs = match method {
                Estimator::Cap => prep.sample.clone(),
                Estimator::LwCap => prep.lw.clone(),
                Estimator::CsCap => match &component.shrinkage {
                    Some(params) => cs_shrink(&prep.sample, params),
                    None => prep.sample.clone(),
                },
            };
            let estimates = covs.projected_variances(&unit);
            let (eigen_error, eigen_sq_error) = eigen_errors(&estimates, &truth, dim);
            let beta_true = truth.beta(dim)[1];
            let covered = match bootstrap {
                Some(boot) => {
                    let proj = ProjectedStudy::new(&prep.sample, &prep.lw, prep.design.clone(), &component.gamma);
                    let boot = BootstrapConfig {
                        seed: replicate_seed(boot.seed, r * 2 + slot),
                        refit_gamma: false,
                        ..boot.clone()
                    };
                    Some(bootstrap_projected(&proj, &boot, &fit_cfg)?.covers(1, beta_true))
                }
                None => None,
            };
            records.push(ReplicateRecord {
                replicate: r,
                dim,
                method,
                beta1: component.beta[1],
                beta1_true: beta_true,
                eigen_error,
                eigen_sq_error,
                similarity: similarity(&component.gamma, &truth.direction(dim)),
                covered,
            });
        }
    }
    Ok(records)
}

pub fn run_unknown_gamma(
    design: &SimDesign,
    methods: &[Estimator],
    replicates: usize,
    bootstrap: Option<&BootstrapConfig>,
    cfg: &FitConfig,
) -> Result<Vec<SimMetrics>> {
    let records = unknown_gamma_records(design, methods, replicates, bootstrap, cfg)?;
    Ok(group(design, &records, methods))
}

/// Estimated-direction table over a grid of `(n, T)` sizes at fixed `p`.
pub fn run_table2(
    p: usize,
    sizes: &[(usize, usize)],
    replicates: usize,
    bootstrap: Option<&BootstrapConfig>,
    seed: u64,
    cfg: &FitConfig,
) -> Result<Vec<SimMetrics>> {
    let methods = [Estimator::LwCap, Estimator::CsCap];
    let mut out = Vec::new();
    for &(n, t) in sizes {
        out.extend(run_unknown_gamma(&SimDesign::new(p, n, t, seed), &methods, replicates, bootstrap, cfg)?);
    }
    Ok(out)
}
