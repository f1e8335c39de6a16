//! Dense symmetric linear algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::covariance::symmetrize;

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// `(lambda_min, lambda_max)` of a symmetric matrix.
pub fn eigenvalue_range(m: &DMatrix<f64>) -> (f64, f64) {
    let values = m.clone().symmetric_eigenvalues();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Strict positive definiteness with the scale-free threshold
/// `lambda_min > 1e-10 * lambda_max`.
pub fn is_spd(m: &DMatrix<f64>) -> bool {
    let (min, max) = eigenvalue_range(m);
    max > 0.0 && min > 1e-10 * max
}

/// Solution of the symmetric-definite problem `A v = lambda H v` with the
/// smallest `lambda`, normalized so that `v' H v = 1`.
///
/// Reduces to a standard symmetric problem through the Cholesky factor
/// `H = L L'`: the eigenvectors `u` of `L^-1 A L^-T` map back as `v = L^-T u`.
/// Returns `None` if `H` is not positive definite.
pub fn smallest_generalized_eigenpair(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Option<(f64, DVector<f64>)> {
    let chol = Cholesky::new(h.clone())?;
    let l = chol.l();
    let left = l.solve_lower_triangular(a)?;
    let mut reduced = l.solve_lower_triangular(&left.transpose())?;
    symmetrize(&mut reduced);
    let eig = SymmetricEigen::new(reduced);
    let idx = eig.eigenvalues.imin();
    let u = eig.eigenvectors.column(idx).into_owned();
    let v = l.tr_solve_lower_triangular(&u)?;
    Some((eig.eigenvalues[idx], v))
}

/// `log det(M)` for a symmetric positive definite matrix.
pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = Cholesky::new(m.clone())?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Orthonormal basis (`p x (p - r)`) of the Euclidean orthogonal complement
/// of the column span of `u` (`p x r`, full column rank).
pub fn orthogonal_complement(u: &DMatrix<f64>) -> DMatrix<f64> {
    let p = u.nrows();
    let gram = u.tr_mul(u);
    let gram_inv = gram
        .try_inverse()
        .expect("orthogonal_complement: columns must be linearly independent");
    let mut projector = DMatrix::identity(p, p) - u * gram_inv * u.transpose();
    symmetrize(&mut projector);
    let (values, vectors) = sorted_eigen(&projector);
    let keep = values.iter().filter(|&&v| v > 0.5).count();
    debug_assert_eq!(keep, p - u.ncols());
    vectors.columns(0, keep).into_owned()
}

/// Gram-Schmidt orthonormalization through QR, with the sign of each column
/// fixed so that `R` has a positive diagonal.
pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
