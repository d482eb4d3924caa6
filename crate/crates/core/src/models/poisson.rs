use rand::RngCore;
use rand_distr::{Distribution, Poisson};

use crate::math::{exp, ln, ln_gamma};
use crate::score_engine::{ObservationModel, ScalarEval};
use crate::{Matrix, Vector};

/// Smallest intensity at which the identity-link density is evaluated.
pub const INTENSITY_FLOOR: f64 = 1e-8;

/// Map from the state to the Poisson intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoissonLink {
    /// Intensity equals the state. The filter evaluates the density at
    /// `max(a, INTENSITY_FLOOR)`; the simulator uses `max(alpha, 0)`.
    #[default]
    Identity,
    /// Intensity is `e^alpha`.
    Log,
}

/// `y_t ~ Poisson(lambda(alpha_t))` for count or duration data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PoissonDuration {
    pub link: PoissonLink,
}

impl PoissonDuration {
    pub fn new(link: PoissonLink) -> Self {
        PoissonDuration { link }
    }

    fn eval(&self, y: f64, a: f64) -> ScalarEval {
        let log_fact = ln_gamma(y + 1.0);
        match self.link {
            PoissonLink::Identity => ScalarEval {
                log_density: y * ln(a) - a - log_fact,
                score: y / a - 1.0,
                hessian: -y / (a * a),
            },
            PoissonLink::Log => {
                let lam = exp(a);
                ScalarEval {
                    log_density: y * a - lam - log_fact,
                    score: y - lam,
                    hessian: -lam,
                }
            }
        }
    }

    fn intensity(&self, a: f64) -> f64 {
        match self.link {
            PoissonLink::Identity => a,
            PoissonLink::Log => exp(a),
        }
    }
}

impl ObservationModel for PoissonDuration {
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

    fn information(&self, a: &[f64]) -> Option<Matrix> {
        let info = match self.link {
            PoissonLink::Identity => 1.0 / a[0],
            PoissonLink::Log => exp(a[0]),
        };
        Some(Matrix::from_element(1, 1, info))
    }

    fn signal(&self, a: &[f64]) -> Vector {
        Vector::from_element(1, self.intensity(a[0]))
    }

    fn simulate_observation(&self, a: &[f64], rng: &mut dyn RngCore) -> Vector {
        let lam = self.intensity(a[0]).max(0.0);
        let y = if lam > 0.0 {
            Poisson::new(lam).expect("positive finite intensity").sample(rng)
        } else {
            0.0
        };
        Vector::from_element(1, y)
    }

    /// `e^(-a)`.
    fn default_scaling(&self, a: &[f64]) -> Option<Matrix> {
        Some(Matrix::from_element(1, 1, exp(-a[0])))
    }

    fn check_observation(&self, y: &[f64]) -> bool {
        y[0] >= 0.0 && libm::floor(y[0]) == y[0]
    }

    /// Intensity `max(lambda(a), 0)`, matching the simulator.
    fn dgp_log_density(&self, y: &[f64], a: &[f64]) -> f64 {
        let lam = self.intensity(a[0]).max(0.0);
        if lam > 0.0 {
            y[0] * ln(lam) - lam - ln_gamma(y[0] + 1.0)
        } else if y[0] == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn clamp_state(&self, a: &mut [f64]) -> bool {
        if self.link == PoissonLink::Identity && !(a[0] >= INTENSITY_FLOOR) {
            a[0] = INTENSITY_FLOOR;
            true
        } else {
            false
        }
    }

    fn scalar_predictive(&self, y: f64, a: f64, _p: f64) -> ScalarEval {
        self.eval(y, a)
    }
}
