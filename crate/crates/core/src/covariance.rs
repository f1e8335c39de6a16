use nalgebra::{DMatrix, DVector};

use crate::data::{CovarianceKind, CovarianceSet, Study, SubjectData};

/// `S_i = Y_i' Y_i / T_i`, symmetrized.
///
/// No centering happens here; a centered study already has zero column means.
pub fn sample_covariance(subject: &SubjectData) -> DMatrix<f64> {
    let y = &subject.observations;
    let mut s = y.tr_mul(y);
    s /= y.nrows() as f64;
    symmetrize(&mut s);
    s
}

pub fn sample_covariances(study: &Study) -> CovarianceSet {
    CovarianceSet {
        matrices: study.subjects.iter().map(sample_covariance).collect(),
        weights: study.observation_counts(),
        kind: CovarianceKind::Sample,
    }
}

/// Observation-weighted average `sum_i T_i M_i / sum_i T_i`.
pub fn pooled_covariance(covs: &CovarianceSet) -> DMatrix<f64> {
    assert!(!covs.is_empty(), "pooled covariance of an empty set");
    let p = covs.dim();
    let total: usize = covs.weights.iter().sum();
    let mut out = DMatrix::zeros(p, p);
    for (m, &w) in covs.matrices.iter().zip(&covs.weights) {
        out.zip_apply(m, |a, b| *a += w as f64 * b);
    }
    out /= total as f64;
    symmetrize(&mut out);
    out
}

/// Replaces `m` by `(m + m') / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// `v' M v`.
pub fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for j in 0..n {
        let col = m.column(j);
        acc += v[j] * col.dot(v);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn single_observation_outer_product() {
        let s = SubjectData::new("a", dmatrix![1.0, 2.0], dvector![1.0]);
        assert_eq!(sample_covariance(&s), dmatrix![1.0, 2.0; 2.0, 4.0]);
    }

    #[test]
    fn scaled_identity_rows_give_identity() {
        let r2 = 2f64.sqrt();
        let s = SubjectData::new("a", dmatrix![r2, 0.0; 0.0, r2], dvector![1.0]);
        assert_relative_eq!(sample_covariance(&s), DMatrix::identity(2, 2), epsilon = 1e-15);
    }

    #[test]
    fn matches_per_entry_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (t, p) in [(3, 4), (5, 7)] {
            let y = random_matrix(&mut rng, t, p);
            let s = sample_covariance(&SubjectData::new("a", y.clone(), dvector![1.0]));
            for j in 0..p {
                for k in 0..p {
                    let mut acc = 0.0;
                    for r in 0..t {
                        acc += y[(r, j)] * y[(r, k)];
                    }
                    assert!((s[(j, k)] - acc / t as f64).abs() < 1e-12);
                }
            }
        }
    }

    fn set(matrices: Vec<DMatrix<f64>>, weights: Vec<usize>) -> CovarianceSet {
        CovarianceSet {
            matrices,
            weights,
            kind: CovarianceKind::Sample,
        }
    }

    #[test]
    fn pooled_of_identical_is_fixed_point() {
        let m = dmatrix![2.0, 0.5; 0.5, 1.0];
        let pooled = pooled_covariance(&set(vec![m.clone(), m.clone()], vec![3, 9]));
        assert_relative_eq!(pooled, m, epsilon = 1e-15);
    }

    #[test]
    fn pooled_arithmetic_mean() {
        let i = DMatrix::<f64>::identity(3, 3);
        let pooled = pooled_covariance(&set(vec![i.clone(), &i * 3.0], vec![1, 1]));
        assert_relative_eq!(pooled, &i * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn pooled_matches_explicit_weighted_sum_and_is_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mats: Vec<_> = (0..3)
            .map(|_| {
                let a = random_matrix(&mut rng, 4, 4);
                &a * a.transpose() + DMatrix::identity(4, 4)
            })
            .collect();
        let weights = vec![2, 3, 5];
        let pooled = pooled_covariance(&set(mats.clone(), weights.clone()));
        let explicit = (&mats[0] * 2.0 + &mats[1] * 3.0 + &mats[2] * 5.0) / 10.0;
        assert_relative_eq!(pooled, explicit, epsilon = 1e-13);

        let reversed = pooled_covariance(&set(
            mats.iter().rev().cloned().collect(),
            weights.iter().rev().copied().collect(),
        ));
        assert_relative_eq!(pooled, reversed, epsilon = 1e-13);
    }

    #[test]
    fn quadratic_form_nonnegative_on_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = random_matrix(&mut rng, 3, 6);
        let s = sample_covariance(&SubjectData::new("a", y, dvector![1.0]));
        for _ in 0..100 {
            let v = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            assert!(quad_form(&s, &v) >= -1e-12);
            assert_relative_eq!(quad_form(&s, &v), (v.transpose() * &s * &v)[0], epsilon = 1e-12);
        }
    }
}
