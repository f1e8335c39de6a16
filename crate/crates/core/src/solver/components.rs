use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};

use super::dfd::dfd;
use super::fit::{fit_prepared, working_covariances, ComponentFit, PreparedStudy};
use super::{DeflationMetric, FitConfig};
use crate::covariance::pooled_covariance;
use crate::data::Study;
use crate::error::{CovcapError, Result};
use crate::linalg::orthogonal_complement;

pub(crate) fn ser_vector<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

/// Components fitted in sequence, each orthogonal to the earlier ones.
#[derive(Debug, Clone, Serialize)]
pub struct ComponentSet {
    pub components: Vec<ComponentFit>,
    /// `dfd[j]` is the deviation from diagonality of the first `j + 1`
    /// directions, measured on the first component's covariance estimates.
    pub dfd: Vec<f64>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Directions as columns of a `p x k` matrix.
    pub fn gammas(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&self.components.iter().map(|c| c.gamma.clone()).collect::<Vec<_>>())
    }

    /// Coefficients as rows of a `k x q` matrix.
    pub fn betas(&self) -> DMatrix<f64> {
        DMatrix::from_rows(
            &self
                .components
                .iter()
                .map(|c| c.beta.transpose())
                .collect::<Vec<_>>(),
        )
    }
}

/// Fits `k` components by deflation.
///
/// Component `j + 1` is fitted on the data projected onto the orthogonal
/// complement of the earlier directions (Euclidean) or of `H gamma` for the
/// earlier directions (constraint metric), then mapped back to `R^p`.
pub fn fit_components(study: &Study, k: usize, cfg: &FitConfig) -> Result<ComponentSet> {
    let p = study.p();
    if k == 0 {
        return Err(CovcapError::InvalidConfig("need at least one component".into()));
    }
    if k > p {
        return Err(CovcapError::DimensionExhausted { k, p });
    }
    let prep = PreparedStudy::new(study);
    let first = fit_prepared(&prep, cfg, &|_| {})?;
    let working = working_covariances(&prep, &first);
    let h = pooled_covariance(&working);

    let mut components = vec![first];
    while components.len() < k {
        let previous = DMatrix::from_columns(
            &components
                .iter()
                .map(|c| match cfg.deflation {
                    DeflationMetric::Euclidean => c.gamma.clone(),
                    DeflationMetric::Constraint => &h * &c.gamma,
                })
                .collect::<Vec<_>>(),
        );
        let basis = orthogonal_complement(&previous);
        let reduced = study.project(&basis);
        let mut fit = fit_prepared(&PreparedStudy::new(&reduced), cfg, &|_| {})?;
        fit.gamma = crate::data::canonical_sign(&basis * &fit.gamma);
        components.push(fit);
    }

    let gammas = DMatrix::from_columns(&components.iter().map(|c| c.gamma.clone()).collect::<Vec<_>>());
    let dfd = (1..=k)
        .map(|j| dfd(&gammas.columns(0, j).into_owned(), &working))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComponentSet { components, dfd })
}
