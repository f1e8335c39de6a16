use std::borrow::Cow;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use super::beta::newton_beta;
use super::gamma::update_gamma_with_eigenvalue;
use super::objective::objective_from_projections;
use super::{Estimator, FitConfig};
use crate::covariance::{pooled_covariance, quad_form, sample_covariances};
use crate::data::{canonical_sign, CovarianceSet, ProjectionState, Study};
use crate::error::{CovcapError, Result};
use crate::linalg::sorted_eigen;
use crate::shrinkage::{cs_shrink, lw_covariances, shrinkage_from_projections, ShrinkageParams};

/// Covariance sets and design shared by every start and every estimator.
#[derive(Debug, Clone)]
pub struct PreparedStudy {
    pub design: DMatrix<f64>,
    pub counts: Vec<usize>,
    pub sample: CovarianceSet,
    pub lw: CovarianceSet,
    pub n: usize,
    pub p: usize,
}

impl PreparedStudy {
    pub fn new(study: &Study) -> Self {
        Self {
            design: study.design(),
            counts: study.observation_counts(),
            sample: sample_covariances(study),
            lw: lw_covariances(study),
            n: study.n(),
            p: study.p(),
        }
    }

    pub fn t_min(&self) -> usize {
        self.counts.iter().copied().min().unwrap_or(0)
    }
}

/// Result of fitting a single component.
#[derive(Debug, Clone, Serialize)]
pub struct ComponentFit {
    #[serde(serialize_with = "crate::solver::components::ser_vector")]
    pub gamma: DVector<f64>,
    #[serde(serialize_with = "crate::solver::components::ser_vector")]
    pub beta: DVector<f64>,
    pub estimator: Estimator,
    pub objective: f64,
    /// Objective after initialization and after every outer iteration of
    /// the selected start.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub init_index: usize,
    pub n_inits: usize,
    pub failed_inits: usize,
    /// Shared shrinkage parameters at the final iterate (shared shrinkage only).
    pub shrinkage: Option<ShrinkageParams>,
}

impl ComponentFit {
    pub fn state(&self) -> ProjectionState {
        ProjectionState::new(self.gamma.clone(), self.beta.clone())
    }
}

/// What an observer sees after every outer iteration.
#[derive(Debug)]
pub struct IterationSnapshot<'a> {
    pub init_index: usize,
    pub iteration: usize,
    pub gamma: &'a DVector<f64>,
    pub beta: &'a DVector<f64>,
    pub covariances: &'a CovarianceSet,
    pub shrinkage: Option<&'a ShrinkageParams>,
    pub objective: f64,
}

/// Fits the first component of `study`.
pub fn fit_component(study: &Study, cfg: &FitConfig) -> Result<ComponentFit> {
    fit_prepared(&PreparedStudy::new(study), cfg, &|_| {})
}

/// [`fit_component`] with a callback run after every outer iteration.
pub fn fit_component_observed(
    study: &Study,
    cfg: &FitConfig,
    observer: &(dyn Fn(&IterationSnapshot) + Sync),
) -> Result<ComponentFit> {
    fit_prepared(&PreparedStudy::new(study), cfg, observer)
}

pub fn fit_prepared(
    prep: &PreparedStudy,
    cfg: &FitConfig,
    observer: &(dyn Fn(&IterationSnapshot) + Sync),
) -> Result<ComponentFit> {
    cfg.validate()?;
    if cfg.estimator == Estimator::Cap && prep.t_min() <= prep.p {
        return Err(CovcapError::IllPosedCap {
            t_min: prep.t_min(),
            p: prep.p,
        });
    }
    let starts = initial_directions(&prep.sample, cfg.inits_for(prep.p), cfg.seed);
    let n_inits = starts.len();

    let results: Vec<Result<ComponentFit>> = starts
        .into_par_iter()
        .enumerate()
        .map(|(k, gamma0)| run_from_start(prep, cfg, k, gamma0, observer))
        .collect();

    let mut best: Option<ComponentFit> = None;
    let mut first_error = None;
    let mut failed = 0;
    for result in results {
        match result {
            Ok(fit) => {
                let better = match &best {
                    None => true,
                    Some(b) => fit.objective < b.objective - 1e-10 * b.objective.abs().max(1.0),
                };
                if better {
                    best = Some(fit);
                }
            }
            Err(e) => {
                warn!("start failed: {e}");
                failed += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    match best {
        Some(mut fit) => {
            fit.n_inits = n_inits;
            fit.failed_inits = failed;
            Ok(fit)
        }
        None => Err(first_error.expect("at least one start")),
    }
}

/// Leading eigenvectors of the pooled sample covariance, followed by seeded
/// Gaussian directions if more starts than dimensions are requested.
fn initial_directions(sample: &CovarianceSet, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let pooled = pooled_covariance(sample);
    let p = pooled.nrows();
    let (_, vectors) = sorted_eigen(&pooled);
    let mut starts: Vec<DVector<f64>> = (0..count.min(p))
        .map(|j| canonical_sign(vectors.column(j).into_owned()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while starts.len() < count {
        let v = DVector::<f64>::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let norm = v.norm();
        starts.push(v / norm);
    }
    starts
}

fn run_from_start(
    prep: &PreparedStudy,
    cfg: &FitConfig,
    init_index: usize,
    gamma0: DVector<f64>,
    observer: &(dyn Fn(&IterationSnapshot) + Sync),
) -> Result<ComponentFit> {
    let lw_h = pooled_covariance(&prep.lw);
    let mut gamma = &gamma0 / quad_form(&lw_h, &gamma0).sqrt();
    let mut beta = newton_beta(
        &prep.lw.projected_variances(&gamma),
        &prep.design,
        &prep.counts,
        None,
        cfg,
    )?;

    let fixed: Option<(&CovarianceSet, DMatrix<f64>)> = match cfg.estimator {
        Estimator::Cap => Some((&prep.sample, pooled_covariance(&prep.sample))),
        Estimator::LwCap => Some((&prep.lw, lw_h.clone())),
        Estimator::CsCap => None,
    };

    let mut trace = Vec::with_capacity(cfg.max_outer_iters + 1);
    let mut shrinkage = None;
    let mut converged = false;
    let mut iterations = 0;

    for iteration in 1..=cfg.max_outer_iters {
        iterations = iteration;
        let (covs, h): (Cow<CovarianceSet>, Cow<DMatrix<f64>>) = match &fixed {
            Some((c, h)) => (Cow::Borrowed(*c), Cow::Borrowed(h)),
            None => {
                let params = shared_params(prep, cfg, &gamma, &beta);
                let covs = cs_shrink(&prep.sample, &params);
                let h = pooled_covariance(&covs);
                shrinkage = Some(params);
                (Cow::Owned(covs), Cow::Owned(h))
            }
        };

        gamma /= quad_form(&h, &gamma).sqrt();
        if iteration == 1 {
            trace.push(eval(&covs, prep, &gamma, &beta));
        }
        beta = newton_beta(
            &covs.projected_variances(&gamma),
            &prep.design,
            &prep.counts,
            Some(&beta),
            cfg,
        )?;
        gamma = update_gamma_with_eigenvalue(&beta, &covs, &prep.design, &h)?.0;
        let value = eval(&covs, prep, &gamma, &beta);

        observer(&IterationSnapshot {
            init_index,
            iteration,
            gamma: &gamma,
            beta: &beta,
            covariances: &covs,
            shrinkage: shrinkage.as_ref(),
            objective: value,
        });

        let previous = *trace.last().expect("nonempty trace");
        trace.push(value);
        let change = (previous - value).abs() / previous.abs().max(1e-300);
        if change < cfg.objective_rel_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!(
            "start {init_index} stopped after {} iterations without converging",
            cfg.max_outer_iters
        );
    }
    debug!("start {init_index}: objective {:.6} after {iterations} iterations", trace.last().unwrap());

    Ok(ComponentFit {
        gamma,
        beta,
        estimator: cfg.estimator,
        objective: *trace.last().expect("nonempty trace"),
        objective_trace: trace,
        iterations,
        converged,
        init_index,
        n_inits: 1,
        failed_inits: 0,
        shrinkage,
    })
}

fn eval(covs: &CovarianceSet, prep: &PreparedStudy, gamma: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = &prep.design * beta;
    objective_from_projections(&covs.projected_variances(gamma), eta.as_slice(), &prep.counts)
}

/// Shared shrinkage parameters at `(gamma, beta)`; falls back to no
/// shrinkage when the dispersion `delta2` vanishes.
pub(crate) fn shared_params(
    prep: &PreparedStudy,
    cfg: &FitConfig,
    gamma: &DVector<f64>,
    beta: &DVector<f64>,
) -> ShrinkageParams {
    let projected = prep.sample.projected_variances(gamma);
    let expected: Vec<f64> = (&prep.design * beta).iter().map(|e| e.exp()).collect();
    let gamma_norm2 = gamma.norm_squared();
    match shrinkage_from_projections(&projected, &expected, &prep.counts, gamma_norm2, cfg.phi_variant) {
        Ok(params) => params,
        Err(_) => {
            warn!("shrinkage dispersion is zero; using unshrunk covariances");
            let mu = expected.iter().sum::<f64>() / (expected.len() as f64 * gamma_norm2);
            ShrinkageParams::no_shrinkage(mu, prep.n)
        }
    }
}

/// Covariance set the fit's objective was evaluated on.
pub fn working_covariances(prep: &PreparedStudy, fit: &ComponentFit) -> CovarianceSet {
    match fit.estimator {
        Estimator::Cap => prep.sample.clone(),
        Estimator::LwCap => prep.lw.clone(),
        Estimator::CsCap => match &fit.shrinkage {
            Some(params) => cs_shrink(&prep.sample, params),
            None => prep.sample.clone(),
        },
    }
}
