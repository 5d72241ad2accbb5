//! Dense linear-algebra helpers with the crate-wide ridge policy.
//!
//! Sample covariances are routinely singular when N < p, so every
//! factorization in the crate goes through [`ridged_cholesky`]: if the plain
//! Cholesky fails, a ridge of eps * mean(diag) * I is added with eps
//! escalating 1e-10, 1e-8, 1e-6 before giving up.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const RIDGE_STEPS: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// A Cholesky factorization together with the ridge that was required.
pub struct RidgedCholesky {
    pub chol: Cholesky<f64, Dyn>,
    /// Absolute value added to the diagonal; 0.0 when the matrix factored as-is.
    pub ridge: f64,
}

impl RidgedCholesky {
    /// log-determinant of the (ridged) matrix.
    pub fn log_det(&self) -> f64 {
        self.chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_vector(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// Factor a symmetric matrix, escalating the ridge until the Cholesky
/// succeeds or the policy is exhausted.
pub fn ridged_cholesky(mat: &DMatrix<f64>) -> Result<RidgedCholesky> {
    let p = mat.nrows();
    if p == 0 {
        return Err(Error::EmptyInput("cannot factor a 0x0 matrix".into()));
    }
    if let Some(chol) = Cholesky::new(mat.clone()) {
        return Ok(RidgedCholesky { chol, ridge: 0.0 });
    }
    let scale = mat.trace() / p as f64;
    for eps in RIDGE_STEPS {
        let ridge = eps * scale;
        let mut m = mat.clone();
        for i in 0..p {
            m[(i, i)] += ridge;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(RidgedCholesky { chol, ridge });
        }
    }
    Err(Error::SingularMatrix(format!(
        "{p}x{p} matrix not positive definite after ridge escalation"
    )))
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order and eigenvector columns reordered to match.
pub fn sorted_symmetric_eigen(mat: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = mat.nrows();
    let eig = mat
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| Error::EigenFailure(format!("{p}x{p} symmetric eigen did not converge")))?;
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(p, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Check symmetry up to a relative tolerance on the largest entry.
pub fn is_symmetric(mat: &DMatrix<f64>, rel_tol: f64) -> bool {
    if mat.nrows() != mat.ncols() {
        return false;
    }
    let scale = mat.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..mat.nrows() {
        for j in (i + 1)..mat.ncols() {
            if (mat[(i, j)] - mat[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

/// Extract the square submatrix indexed by `idx` on both axes.
pub fn principal_submatrix(mat: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let m = idx.len();
    DMatrix::from_fn(m, m, |r, c| mat[(idx[r], idx[c])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_spd_no_ridge() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let f = ridged_cholesky(&m).unwrap();
        assert_eq!(f.ridge, 0.0);
        assert_relative_eq!(f.log_det(), (4.0f64 * 3.0 - 1.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn cholesky_singular_gets_ridge() {
        // rank-1 matrix
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = ridged_cholesky(&m).unwrap();
        assert!(f.ridge > 0.0);
    }

    #[test]
    fn cholesky_zero_matrix_fails() {
        let m = DMatrix::zeros(3, 3);
        assert!(matches!(
            ridged_cholesky(&m),
            Err(Error::SingularMatrix(_))
        ));
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]);
        let (vals, vecs) = sorted_symmetric_eigen(&m).unwrap();
        assert_relative_eq!(vals[0], 5.0, epsilon = 1e-10);
        assert_relative_eq!(vals[1], 3.0, epsilon = 1e-10);
        assert_relative_eq!(vals[2], 1.0, epsilon = 1e-10);
        // leading eigenvector points along axis 1
        assert_relative_eq!(vecs.column(0)[1].abs(), 1.0, epsilon = 1e-10);
    }
}
