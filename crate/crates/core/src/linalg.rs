use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalue tolerance for semidefiniteness checks.
pub(crate) const PSD_TOL: f64 = 1e-12;

pub(crate) fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

pub(crate) fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(m.clone()).eigenvalues
}

/// Smallest eigenvalue of a symmetric matrix (`+inf` for an empty one).
pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).iter().copied().fold(f64::INFINITY, f64::min)
}

pub(crate) fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn require_psd(m: &DMatrix<f64>) -> Result<()> {
    if !is_symmetric(m, PSD_TOL) {
        return Err(Error::DimensionMismatch("matrix must be square and symmetric".into()));
    }
    let min = min_eigenvalue(m);
    if min < -PSD_TOL {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    Ok(())
}

/// A factor `L` with `L L^T = m` for a symmetric PSD matrix, built from the
/// eigendecomposition so that singular matrices are handled.
pub(crate) fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let mut factor = eig.eigenvectors;
    for (j, s) in scale.iter().enumerate() {
        factor.column_mut(j).scale_mut(*s);
    }
    factor
}
