use rand::RngCore;
use rand_distr::{Distribution, StudentT};

use super::student_t_log_kernel;
use crate::error::{Error, Result};
use crate::math::exp;
use crate::score_engine::{ObservationModel, ScalarEval};
use crate::{Matrix, Vector};

/// `y_t = alpha_t + eta_t` with Student-t errors of variance `e^lambda`.
///
/// With `s = (nu - 2) e^lambda` and `u = y - a` the density is
/// `Gamma((nu+1)/2) / (Gamma(nu/2) sqrt(pi s)) (1 + u^2 / s)^(-(nu+1)/2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentTLocation {
    pub lambda: f64,
    pub nu: f64,
}

impl StudentTLocation {
    pub fn new(lambda: f64, nu: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::param("lambda must be finite"));
        }
        if !(nu > 2.0) || !nu.is_finite() {
            return Err(Error::param(alloc::format!("nu must exceed 2, got {nu}")));
        }
        Ok(StudentTLocation { lambda, nu })
    }

    fn scale(&self) -> f64 {
        (self.nu - 2.0) * exp(self.lambda)
    }

    fn eval(&self, y: f64, a: f64) -> ScalarEval {
        let s = self.scale();
        let u = y - a;
        let d = s + u * u;
        let k = self.nu + 1.0;
        ScalarEval {
            log_density: student_t_log_kernel(self.nu, s, u * u),
            score: k * u / d,
            hessian: k * (u * u - s) / (d * d),
        }
    }
}

impl ObservationModel for StudentTLocation {
    fn state_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn log_density(&self, y: &[f64], a: &[f64]) -> f64 {
        self.eval(y[0], a[0]).log_density
    }

    fn score(&self, y: &[f64], a: &[f64]) -> Vector {
        Vector::from_element(1, self.eval(y[0], a[0]).score)
    }

    fn hessian(&self, y: &[f64], a: &[f64]) -> Matrix {
        Matrix::from_element(1, 1, self.eval(y[0], a[0]).hessian)
    }

    fn information(&self, _a: &[f64]) -> Option<Matrix> {
        let nu = self.nu;
        Some(Matrix::from_element(
            1,
            1,
            nu * (nu + 1.0) / ((nu + 3.0) * self.scale()),
        ))
    }

    fn signal(&self, a: &[f64]) -> Vector {
        Vector::from_element(1, a[0])
    }

    fn simulate_observation(&self, a: &[f64], rng: &mut dyn RngCore) -> Vector {
        let t = StudentT::new(self.nu).expect("nu validated").sample(rng);
        let sd = crate::math::sqrt(exp(self.lambda) * (self.nu - 2.0) / self.nu);
        Vector::from_element(1, a[0] + sd * t)
    }

    /// `nu / (nu + 1) e^(2 lambda)`.
    fn default_scaling(&self, _a: &[f64]) -> Option<Matrix> {
        let nu = self.nu;
        Some(Matrix::from_element(1, 1, nu / (nu + 1.0) * exp(2.0 * self.lambda)))
    }

    fn scalar_predictive(&self, y: f64, a: f64, _p: f64) -> ScalarEval {
        self.eval(y, a)
    }
}
