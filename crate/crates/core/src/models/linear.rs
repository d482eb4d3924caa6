use alloc::format;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lgss::{GaussianState, MAX_INNOVATION_CONDITION};
use crate::linalg::{self, SpdFactor};
use crate::math::{ln, LN_2PI};
use crate::score_engine::{ObservationModel, ScalarEval};
use crate::{Matrix, Vector};

/// `y_t = Z alpha_t + eps_t`, `eps_t ~ N(0, H)`.
///
/// The predictive methods use the exact predictive density
/// `N(Z a_t, Z P_t Z' + H)`, so the score-driven filter run on this model is
/// the Kalman filter.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussian {
    pub z: Matrix,
    pub h: Matrix,
    h_root: Matrix,
}

impl LinearGaussian {
    pub fn new(z: Matrix, h: Matrix) -> Result<Self> {
        let p = z.nrows();
        if p == 0 || z.ncols() == 0 || h.shape() != (p, p) {
            return Err(Error::input(format!(
                "Z {:?} and H {:?} have inconsistent shapes",
                z.shape(),
                h.shape()
            )));
        }
        if !linalg::all_finite(&z) || !linalg::all_finite(&h) {
            return Err(Error::input("Z and H must be finite"));
        }
        if linalg::asymmetry(&h) > 1e-12 || !linalg::is_psd(&h, linalg::PSD_TOLERANCE) {
            return Err(Error::input("H must be symmetric positive semidefinite"));
        }
        let h_root = linalg::psd_sqrt(&h);
        Ok(LinearGaussian { z, h, h_root })
    }

    /// Log-density, score and Hessian of `N(y; Z a, F)` in `a`.
    fn gaussian(&self, y: &[f64], a: &[f64], f: &Matrix) -> Option<(f64, Vector, Matrix)> {
        let factor = SpdFactor::new(f, MAX_INNOVATION_CONDITION)?;
        let a = Vector::from_column_slice(a);
        let v = Vector::from_column_slice(y) - &self.z * a;
        let finv_v = factor.solve_vec(&v);
        let p = self.z.nrows() as f64;
        let logp = -0.5 * p * LN_2PI - 0.5 * (factor.ln_determinant() + v.dot(&finv_v));
        let score = self.z.transpose() * finv_v;
        let hess = linalg::symmetrize(&-(self.z.transpose() * factor.solve(&self.z)));
        Some((logp, score, hess))
    }

    fn predictive_cov(&self, state: &GaussianState) -> Matrix {
        linalg::symmetrize(&(&self.z * &state.p * self.z.transpose() + &self.h))
    }

    fn nan_triple(&self) -> (f64, Vector, Matrix) {
        let m = self.z.ncols();
        (
            f64::NAN,
            Vector::from_element(m, f64::NAN),
            Matrix::from_element(m, m, f64::NAN),
        )
    }
}

impl ObservationModel for LinearGaussian {
    fn state_dim(&self) -> usize {
        self.z.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.z.nrows()
    }

    fn log_density(&self, y: &[f64], a: &[f64]) -> f64 {
        self.gaussian(y, a, &self.h).map_or(f64::NAN, |g| g.0)
    }

    fn score(&self, y: &[f64], a: &[f64]) -> Vector {
        self.gaussian(y, a, &self.h).unwrap_or_else(|| self.nan_triple()).1
    }

    fn hessian(&self, y: &[f64], a: &[f64]) -> Matrix {
        self.gaussian(y, a, &self.h).unwrap_or_else(|| self.nan_triple()).2
    }

    fn information(&self, _a: &[f64]) -> Option<Matrix> {
        let factor = SpdFactor::new(&self.h, MAX_INNOVATION_CONDITION)?;
        Some(linalg::symmetrize(&(self.z.transpose() * factor.solve(&self.z))))
    }

    fn signal(&self, a: &[f64]) -> Vector {
        &self.z * Vector::from_column_slice(a)
    }

    fn simulate_observation(&self, a: &[f64], rng: &mut dyn RngCore) -> Vector {
        let p = self.z.nrows();
        let e = Vector::from_fn(p, |_, _| StandardNormal.sample(&mut *rng));
        self.signal(a) + &self.h_root * e
    }

    fn predictive_log_density(&self, y: &[f64], state: &GaussianState) -> f64 {
        let f = self.predictive_cov(state);
        self.gaussian(y, state.a.as_slice(), &f).map_or(f64::NAN, |g| g.0)
    }

    fn predictive_score(&self, y: &[f64], state: &GaussianState) -> Vector {
        let f = self.predictive_cov(state);
        self.gaussian(y, state.a.as_slice(), &f)
            .unwrap_or_else(|| self.nan_triple())
            .1
    }

    fn predictive_hessian(&self, y: &[f64], state: &GaussianState) -> Matrix {
        let f = self.predictive_cov(state);
        self.gaussian(y, state.a.as_slice(), &f)
            .unwrap_or_else(|| self.nan_triple())
            .2
    }

    fn scalar_predictive(&self, y: f64, a: f64, p: f64) -> ScalarEval {
        let z = self.z[(0, 0)];
        let f = z * p * z + self.h[(0, 0)];
        if !(f > 0.0) {
            return ScalarEval {
                log_density: f64::NAN,
                score: f64::NAN,
                hessian: f64::NAN,
            };
        }
        let v = y - z * a;
        ScalarEval {
            log_density: -0.5 * (LN_2PI + ln(f) + v * v / f),
            score: z * v / f,
            hessian: -z * z / f,
        }
    }
}
