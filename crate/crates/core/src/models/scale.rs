//! Stochastic-volatility observation densities. In every model `e^kappa` is
//! the conditional variance of `y_t`, where `kappa` is the signal.

use alloc::format;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal, StudentT};

use super::student_t_log_kernel;
use crate::error::{Error, Result};
use crate::math::{exp, sqrt, LN_2PI};
use crate::score_engine::{ObservationModel, ScalarEval};
use crate::{Matrix, Vector};

fn check_omega(omega: f64) -> Result<()> {
    if omega.is_finite() {
        Ok(())
    } else {
        Err(Error::param("omega must be finite"))
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 2.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("nu must exceed 2, got {nu}")))
    }
}

/// `y_t ~ N(0, e^(omega + alpha_t))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianScale {
    pub omega: f64,
}

impl GaussianScale {
    pub fn new(omega: f64) -> Result<Self> {
        check_omega(omega)?;
        Ok(GaussianScale { omega })
    }

    fn eval(&self, y: f64, a: f64) -> ScalarEval {
        let kappa = self.omega + a;
        let z = y * y * exp(-kappa);
        ScalarEval {
            log_density: -0.5 * (LN_2PI + kappa + z),
            score: 0.5 * (z - 1.0),
            hessian: -0.5 * z,
        }
    }
}

impl ObservationModel for GaussianScale {
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
        Some(Matrix::from_element(1, 1, 0.5))
    }

    fn signal(&self, a: &[f64]) -> Vector {
        Vector::from_element(1, self.omega + a[0])
    }

    fn simulate_observation(&self, a: &[f64], rng: &mut dyn RngCore) -> Vector {
        let e: f64 = StandardNormal.sample(rng);
        Vector::from_element(1, exp(0.5 * (self.omega + a[0])) * e)
    }

    fn default_scaling(&self, _a: &[f64]) -> Option<Matrix> {
        Some(Matrix::from_element(1, 1, 1.0))
    }

    fn scalar_predictive(&self, y: f64, a: f64, _p: f64) -> ScalarEval {
        self.eval(y, a)
    }
}

/// Student-t density of `y_t` with variance `e^kappa`, as a function of the
/// signal `kappa`: log-density, derivative and second derivative.
fn t_scale_eval(nu: f64, y: f64, kappa: f64) -> ScalarEval {
    let s = (nu - 2.0) * exp(kappa);
    let y2 = y * y;
    let d = s + y2;
    ScalarEval {
        log_density: student_t_log_kernel(nu, s, y2),
        score: -0.5 + 0.5 * (nu + 1.0) * y2 / d,
        hessian: -0.5 * (nu + 1.0) * y2 * s / (d * d),
    }
}

fn t_scale_draw(nu: f64, kappa: f64, rng: &mut dyn RngCore) -> f64 {
    let t = StudentT::new(nu).expect("nu validated").sample(rng);
    sqrt(exp(kappa) * (nu - 2.0) / nu) * t
}

/// `y_t = e^((omega + alpha_t)/2) eps_t` with unit-variance Student-t `eps_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentTScale {
    pub omega: f64,
    pub nu: f64,
}

impl StudentTScale {
    pub fn new(omega: f64, nu: f64) -> Result<Self> {
        check_omega(omega)?;
        check_nu(nu)?;
        Ok(StudentTScale { omega, nu })
    }
}

impl ObservationModel for StudentTScale {
    fn state_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn log_density(&self, y: &[f64], a: &[f64]) -> f64 {
        t_scale_eval(self.nu, y[0], self.omega + a[0]).log_density
    }

    fn score(&self, y: &[f64], a: &[f64]) -> Vector {
        Vector::from_element(1, t_scale_eval(self.nu, y[0], self.omega + a[0]).score)
    }

    fn hessian(&self, y: &[f64], a: &[f64]) -> Matrix {
        Matrix::from_element(1, 1, t_scale_eval(self.nu, y[0], self.omega + a[0]).hessian)
    }

    fn information(&self, _a: &[f64]) -> Option<Matrix> {
        Some(Matrix::from_element(1, 1, self.nu / (2.0 * (self.nu + 3.0))))
    }

    fn signal(&self, a: &[f64]) -> Vector {
        Vector::from_element(1, self.omega + a[0])
    }

    fn simulate_observation(&self, a: &[f64], rng: &mut dyn RngCore) -> Vector {
        Vector::from_element(1, t_scale_draw(self.nu, self.omega + a[0], rng))
    }

    fn default_scaling(&self, _a: &[f64]) -> Option<Matrix> {
        Some(Matrix::from_element(1, 1, 1.0))
    }

    fn scalar_predictive(&self, y: f64, a: f64, _p: f64) -> ScalarEval {
        t_scale_eval(self.nu, y, self.omega + a)
    }
}

/// Two-component stochastic volatility: Student-t returns whose log-variance
/// is `kappa_t = omega + alpha_1t + alpha_2t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoComponentSv {
    pub omega: f64,
    pub nu: f64,
}

impl TwoComponentSv {
    pub fn new(omega: f64, nu: f64) -> Result<Self> {
        check_omega(omega)?;
        check_nu(nu)?;
        Ok(TwoComponentSv { omega, nu })
    }

    fn kappa(&self, a: &[f64]) -> f64 {
        two_component_signal(a, self.omega)
    }
}

/// `omega + a_1 + a_2`.
pub fn two_component_signal(a: &[f64], omega: f64) -> f64 {
    omega + (a[0] + a[1])
}

impl ObservationModel for TwoComponentSv {
    fn state_dim(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn log_density(&self, y: &[f64], a: &[f64]) -> f64 {
        t_scale_eval(self.nu, y[0], self.kappa(a)).log_density
    }

    fn score(&self, y: &[f64], a: &[f64]) -> Vector {
        Vector::from_element(2, t_scale_eval(self.nu, y[0], self.kappa(a)).score)
    }

    fn hessian(&self, y: &[f64], a: &[f64]) -> Matrix {
        Matrix::from_element(2, 2, t_scale_eval(self.nu, y[0], self.kappa(a)).hessian)
    }

    /// Rank one: only the sum of the components is informed by `y_t`.
    fn information(&self, _a: &[f64]) -> Option<Matrix> {
        Some(Matrix::from_element(2, 2, self.nu / (2.0 * (self.nu + 3.0))))
    }

    fn signal(&self, a: &[f64]) -> Vector {
        Vector::from_element(1, self.kappa(a))
    }

    fn simulate_observation(&self, a: &[f64], rng: &mut dyn RngCore) -> Vector {
        Vector::from_element(1, t_scale_draw(self.nu, self.kappa(a), rng))
    }

    fn default_scaling(&self, _a: &[f64]) -> Option<Matrix> {
        None
    }
}
