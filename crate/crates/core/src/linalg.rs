//! Small dense linear-algebra helpers shared by the filters.

use alloc::format;

use nalgebra::{Cholesky, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Eigenvalue tolerance used when checking that a covariance is PSD.
pub const PSD_TOLERANCE: f64 = 1e-10;
/// Floor applied to negative eigenvalues when a covariance is repaired.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Returns `(M + M') / 2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `M - M'`.
pub fn asymmetry(m: &Matrix) -> f64 {
    (m - m.transpose()).amax()
}

pub fn symmetric_eigenvalues(m: &Matrix) -> Vector {
    if m.nrows() == 1 {
        return Vector::from_element(1, m[(0, 0)]);
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    symmetric_eigenvalues(m).min()
}

pub fn is_psd(m: &Matrix, tol: f64) -> bool {
    m.iter().all(|v| v.is_finite()) && min_eigenvalue(m) >= -tol
}

/// Replaces eigenvalues below zero by `floor`. Returns the repaired matrix and
/// whether any eigenvalue had to be clipped.
pub fn clip_psd(m: &Matrix, floor: f64) -> (Matrix, bool) {
    let sym = symmetrize(m);
    if sym.nrows() == 1 {
        let v = sym[(0, 0)];
        return if v < 0.0 {
            (Matrix::from_element(1, 1, floor), true)
        } else {
            (sym, false)
        };
    }
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return (sym, false);
    }
    let clipped = eig.eigenvalues.map(|l| if l < 0.0 { floor } else { l });
    let rebuilt = &eig.eigenvectors * Matrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (symmetrize(&rebuilt), true)
}

/// Inverse of a symmetric matrix through its eigen-decomposition, with
/// eigenvalues raised to at least `floor` first.
pub fn floored_inverse(m: &Matrix, floor: f64) -> Matrix {
    let eig = SymmetricEigen::new(symmetrize(m));
    let inv = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
    symmetrize(&(&eig.eigenvectors * Matrix::from_diagonal(&inv) * eig.eigenvectors.transpose()))
}

/// Raises a symmetric positive-definite matrix to a real power through its
/// eigen-decomposition.
pub fn spd_power(m: &Matrix, power: f64) -> Result<Matrix> {
    if power == 0.0 {
        return Ok(Matrix::identity(m.nrows(), m.ncols()));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::input("matrix power requires a positive-definite matrix"));
    }
    let scaled = eig.eigenvalues.map(|l| crate::math::powf(l, power));
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&scaled) * eig.eigenvectors.transpose())
}

/// Cholesky factorization of a symmetric positive-definite matrix together
/// with its spectral condition number.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    pub condition: f64,
}

impl SpdFactor {
    /// Factorizes `m`; fails when `m` is not positive definite or its
    /// condition number exceeds `max_condition`.
    pub fn new(m: &Matrix, max_condition: f64) -> Option<SpdFactor> {
        let sym = symmetrize(m);
        let condition = if sym.nrows() == 1 {
            if sym[(0, 0)] > 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            let ev = symmetric_eigenvalues(&sym);
            let (lo, hi) = (ev.min(), ev.max());
            if lo > 0.0 {
                hi / lo
            } else {
                f64::INFINITY
            }
        };
        if !(condition <= max_condition) {
            return None;
        }
        let chol = Cholesky::new(sym)?;
        Some(SpdFactor { chol, condition })
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &Matrix) -> Matrix {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> Matrix {
        self.chol.inverse()
    }

    pub fn ln_determinant(&self) -> f64 {
        self.chol.ln_determinant()
    }

    /// Lower-triangular factor `L` with `M = LL'`.
    pub fn l(&self) -> Matrix {
        self.chol.l()
    }
}

/// Symmetric square root `S` with `S S' = M` for a PSD matrix (negative
/// eigenvalues from round-off are treated as zero).
pub fn psd_sqrt(m: &Matrix) -> Matrix {
    if m.nrows() == 1 {
        return Matrix::from_element(1, 1, crate::math::sqrt(m[(0, 0)].max(0.0)));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|l| crate::math::sqrt(l.max(0.0)));
    &eig.eigenvectors * Matrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(t: &Matrix) -> f64 {
    if t.nrows() == 1 {
        return t[(0, 0)].abs();
    }
    t.complex_eigenvalues()
        .iter()
        .map(|z| crate::math::sqrt(z.re * z.re + z.im * z.im))
        .fold(0.0, f64::max)
}

/// Solves the discrete Lyapunov equation `P = T P T' + Q` for a stable `T`.
pub fn discrete_lyapunov(t: &Matrix, q: &Matrix) -> Result<Matrix> {
    let m = t.nrows();
    if t.ncols() != m || q.nrows() != m || q.ncols() != m {
        return Err(Error::input("Lyapunov equation needs square matrices of equal size"));
    }
    let rho = spectral_radius(t);
    if !(rho < 1.0) {
        return Err(Error::param(format!(
            "transition spectral radius {rho} is not below one"
        )));
    }
    if m == 1 {
        let phi = t[(0, 0)];
        return Ok(Matrix::from_element(1, 1, q[(0, 0)] / (1.0 - phi * phi)));
    }
    // (I - T (x) T) vec(P) = vec(Q), column-major vec.
    let kron = t.kronecker(t);
    let system = Matrix::identity(m * m, m * m) - kron;
    let rhs = Vector::from_iterator(m * m, q.iter().copied());
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::input("Lyapunov system is singular"))?;
    Ok(symmetrize(&Matrix::from_iterator(m, m, sol.iter().copied())))
}

/// Mean of the stationary distribution of `alpha' = c + T alpha + eta`.
pub fn stationary_mean(t: &Matrix, c: &Vector) -> Result<Vector> {
    let m = t.nrows();
    let system = Matrix::identity(m, m) - t;
    system
        .lu()
        .solve(c)
        .ok_or_else(|| Error::param("I - T is singular; no stationary mean"))
}

/// Frobenius-norm relative difference `|a - b| / max(|a|, |b|)`, zero when
/// both are zero.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

pub fn relative_error_vec(a: &Vector, b: &Vector) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

pub fn relative_error_scalar(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub(crate) fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lyapunov_scalar_matches_ar1_variance() {
        let t = Matrix::from_element(1, 1, 0.98);
        let q = Matrix::from_element(1, 1, 0.01);
        let p = discrete_lyapunov(&t, &q).unwrap();
        assert_relative_eq!(p[(0, 0)], 0.01 / (1.0 - 0.98 * 0.98), max_relative = 1e-14);
    }

    #[test]
    fn lyapunov_matrix_solves_equation() {
        let t = Matrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.7]);
        let q = Matrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let p = discrete_lyapunov(&t, &q).unwrap();
        let resid = &p - (&t * &p * t.transpose() + &q);
        assert!(resid.amax() < 1e-12);
        assert!(is_psd(&p, 0.0));
    }

    #[test]
    fn lyapunov_rejects_explosive_transition() {
        let t = Matrix::from_row_slice(2, 2, &[1.01, 0.0, 0.0, 0.5]);
        let q = Matrix::identity(2, 2);
        assert!(matches!(discrete_lyapunov(&t, &q), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn spectral_radius_of_rotation_like_matrix() {
        // eigenvalues 0.6 +- 0.3i
        let t = Matrix::from_row_slice(2, 2, &[0.6, -0.3, 0.3, 0.6]);
        assert_relative_eq!(spectral_radius(&t), (0.36f64 + 0.09).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn clip_repairs_indefinite_matrix() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (fixed, clipped) = clip_psd(&m, EIGEN_FLOOR);
        assert!(clipped);
        assert!(min_eigenvalue(&fixed) >= 0.0);
        let (same, clipped) = clip_psd(&Matrix::identity(2, 2), EIGEN_FLOOR);
        assert!(!clipped);
        assert_eq!(same, Matrix::identity(2, 2));
    }

    #[test]
    fn spd_factor_rejects_ill_conditioned() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        assert!(SpdFactor::new(&m, 1e12).is_none());
        let ok = SpdFactor::new(&Matrix::identity(2, 2), 1e12).unwrap();
        assert_eq!(ok.condition, 1.0);
    }

    #[test]
    fn spd_power_inverse_square_root() {
        let m = Matrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = spd_power(&m, -0.5).unwrap();
        let back = &r * &m * &r;
        assert!((back - Matrix::identity(2, 2)).amax() < 1e-12);
    }
}
