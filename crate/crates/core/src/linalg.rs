//! Small dense helpers for the 3x3 matrices that show up everywhere.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Eigenvalues at or below `EIGEN_FLOOR * trace` mark a matrix as singular.
pub const EIGEN_FLOOR: f64 = 1e-12;

pub fn outer(u: &[f64; 3], v: &[f64; 3]) -> Mat3 {
    Mat3::from_fn(|r, c| u[r] * v[c])
}

pub fn to_rows(m: &Mat3) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

pub fn from_rows(rows: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::from_fn(|r, c| rows[r][c])
}

pub fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

/// Ratio of the largest to the smallest eigenvalue magnitude.
pub fn condition_number(m: &Mat3) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a symmetric positive definite matrix via its eigendecomposition.
/// Eigenvalues below `EIGEN_FLOOR * trace` are reported as singular.
pub fn spd_inverse(m: &Mat3) -> Result<Mat3> {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let trace: f64 = eig.eigenvalues.iter().sum();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(trace.is_finite() && trace > 0.0) || min <= EIGEN_FLOOR * trace {
        return Err(Error::SingularMatrix {
            condition: condition_number(&sym),
        });
    }
    let inv_diag = Mat3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    Ok(&eig.eigenvectors * inv_diag * eig.eigenvectors.transpose())
}

pub fn min_eigenvalue(m: &Mat3) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
