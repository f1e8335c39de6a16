//! Domain types shared across the crate: per-subject observations, the
//! validated study, covariance sets and the `(gamma, beta)` projection state.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CovcapError, Result};

/// One subject's `T_i x p` observation matrix and its covariate vector.
///
/// `covariates[0]` is the intercept slot and must be exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub observations: DMatrix<f64>,
    pub covariates: DVector<f64>,
}

impl SubjectData {
    pub fn new(id: impl Into<String>, observations: DMatrix<f64>, covariates: DVector<f64>) -> Self {
        Self {
            id: id.into(),
            observations,
            covariates,
        }
    }

    pub fn n_obs(&self) -> usize {
        self.observations.nrows()
    }

    pub fn dim(&self) -> usize {
        self.observations.ncols()
    }

    /// Subtracts the column means in place.
    pub fn center(&mut self) {
        let t = self.observations.nrows() as f64;
        for mut col in self.observations.column_iter_mut() {
            let mean = col.sum() / t;
            col.add_scalar_mut(-mean);
        }
    }
}

/// An ordered collection of subjects sharing `p` and `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub subjects: Vec<SubjectData>,
    /// Whether per-subject column means were subtracted.
    pub centered: bool,
}

impl Study {
    /// Builds a validated study, optionally centering every subject first.
    pub fn from_subjects(mut subjects: Vec<SubjectData>, center: bool) -> Result<Self> {
        if center {
            subjects.iter_mut().for_each(SubjectData::center);
        }
        validate_study(Study {
            subjects,
            centered: center,
        })
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn p(&self) -> usize {
        self.subjects.first().map_or(0, SubjectData::dim)
    }

    pub fn q(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.covariates.len())
    }

    /// `N = sum_i T_i`.
    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(SubjectData::n_obs).sum()
    }

    pub fn t_min(&self) -> usize {
        self.subjects.iter().map(SubjectData::n_obs).min().unwrap_or(0)
    }

    pub fn t_max(&self) -> usize {
        self.subjects.iter().map(SubjectData::n_obs).max().unwrap_or(0)
    }

    pub fn observation_counts(&self) -> Vec<usize> {
        self.subjects.iter().map(SubjectData::n_obs).collect()
    }

    /// The `n x q` covariate design matrix, one row per subject.
    pub fn design(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.q(), |i, j| self.subjects[i].covariates[j])
    }

    /// Re-expresses every subject's observations in the coordinates of the
    /// orthonormal columns of `basis` (`p x r`), i.e. `Y_i * basis`.
    pub fn project(&self, basis: &DMatrix<f64>) -> Study {
        Study {
            subjects: self
                .subjects
                .iter()
                .map(|s| SubjectData {
                    id: s.id.clone(),
                    observations: &s.observations * basis,
                    covariates: s.covariates.clone(),
                })
                .collect(),
            centered: self.centered,
        }
    }

    /// Study made of the subjects at `indices` (repetitions allowed).
    pub fn resample(&self, indices: &[usize]) -> Study {
        Study {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            centered: self.centered,
        }
    }
}

/// Checks every type invariant of [`Study`] and [`SubjectData`].
pub fn validate_study(raw: Study) -> Result<Study> {
    if raw.subjects.len() < 2 {
        return Err(CovcapError::InvalidStudy(format!(
            "need at least 2 subjects, found {}",
            raw.subjects.len()
        )));
    }
    let first = &raw.subjects[0];
    let (p, q) = (first.dim(), first.covariates.len());
    if p < 2 {
        return Err(CovcapError::InvalidStudy(format!("dimension p = {p} < 2")));
    }
    if q < 1 {
        return Err(CovcapError::InvalidStudy("no covariates (q = 0)".into()));
    }
    for s in &raw.subjects {
        if s.dim() != p {
            return Err(CovcapError::DimensionMismatch {
                subject: s.id.clone(),
                what: "dimension p",
                expected: p,
                found: s.dim(),
            });
        }
        if s.covariates.len() != q {
            return Err(CovcapError::DimensionMismatch {
                subject: s.id.clone(),
                what: "covariate count q",
                expected: q,
                found: s.covariates.len(),
            });
        }
        if s.n_obs() < 2 {
            return Err(CovcapError::InvalidStudy(format!(
                "subject `{}` has {} observations (need at least 2)",
                s.id,
                s.n_obs()
            )));
        }
        if s.observations.iter().chain(s.covariates.iter()).any(|v| !v.is_finite()) {
            return Err(CovcapError::NonFiniteData {
                subject: s.id.clone(),
            });
        }
        if s.covariates[0] != 1.0 {
            return Err(CovcapError::MissingIntercept {
                subject: s.id.clone(),
                found: s.covariates[0],
            });
        }
    }
    Ok(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceKind {
    Sample,
    LedoitWolf,
    CovariateShrunk,
    Oracle,
}

/// Per-subject symmetric `p x p` estimates with their observation weights `T_i`.
#[derive(Debug, Clone)]
pub struct CovarianceSet {
    pub matrices: Vec<DMatrix<f64>>,
    pub weights: Vec<usize>,
    pub kind: CovarianceKind,
}

impl CovarianceSet {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrices.first().map_or(0, DMatrix::nrows)
    }

    /// `gamma' M_i gamma` for every subject.
    pub fn projected_variances(&self, gamma: &DVector<f64>) -> Vec<f64> {
        self.matrices
            .iter()
            .map(|m| crate::covariance::quad_form(m, gamma))
            .collect()
    }
}

/// A projection `gamma` (length `p`) with its log-linear coefficients `beta`
/// (length `q`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionState {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
}

impl ProjectionState {
    pub fn new(gamma: DVector<f64>, beta: DVector<f64>) -> Self {
        Self { gamma, beta }
    }

    /// `x_i' beta` for each subject.
    pub fn linear_predictor(&self, design: &DMatrix<f64>) -> DVector<f64> {
        design * &self.beta
    }
}

/// Flips `v` so that its entry of largest magnitude is positive.
pub fn canonical_sign(mut v: DVector<f64>) -> DVector<f64> {
    let idx = v.iamax();
    if v[idx] < 0.0 {
        v.neg_mut();
    }
    v
}
