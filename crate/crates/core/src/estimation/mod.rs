//! Maximum-likelihood estimation of the static parameters by numerical
//! maximization of the score-driven log-likelihood
//! `sum_t log p(y_t | alpha_t)` evaluated at the predictive filter.
//!
//! The optimizer works on unconstrained coordinates; every parameter has a
//! transform to its natural domain. Estimates, standard errors and the
//! asymptotic covariance are reported in natural coordinates.

pub mod optim;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result, StartDiagnostics};
use crate::lgss::GaussianState;
use crate::linalg;
use crate::math::{atanh, exp, ln, sqrt, tanh};
use crate::models::{
    AnyModel, Family, GaussianScale, PoissonDuration, PoissonLink, StudentTLocation, StudentTScale,
    TwoComponentSv,
};
use crate::rng::{derive_seed, seeded};
use crate::score_engine::{
    sd_filter, sd_filter_loglik, NormalizationScheme, ScoreScaling, SdOptions, TransitionSpec,
};
use crate::stats;
use crate::{Matrix, Vector};

pub use optim::{numerical_hessian, OptimOptions};

/// Shortest series accepted by [`fit`].
pub const MIN_SERIES_LENGTH: usize = 50;

/// Map from an unconstrained coordinate to a parameter's natural domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// The real line.
    Identity,
    /// `(0, inf)` through `exp`.
    Log,
    /// `(-1, 1)` through `tanh`.
    Tanh,
    /// `(2, inf)` through `2 + exp`.
    LogShifted2,
}

impl Transform {
    pub fn to_natural(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log => exp(x),
            Transform::Tanh => tanh(x),
            Transform::LogShifted2 => 2.0 + exp(x),
        }
    }

    pub fn to_free(self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::Log => ln(v),
            Transform::Tanh => atanh(v),
            Transform::LogShifted2 => ln(v - 2.0),
        }
    }

    pub fn in_domain(self, v: f64) -> bool {
        match self {
            Transform::Identity => v.is_finite(),
            Transform::Log => v > 0.0 && v.is_finite(),
            Transform::Tanh => v > -1.0 && v < 1.0,
            Transform::LogShifted2 => v > 2.0 && v.is_finite(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Log => "log",
            Transform::Tanh => "tanh",
            Transform::LogShifted2 => "log_shifted2",
        }
    }
}

/// Named parameters in natural coordinates with their transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub transforms: Vec<Transform>,
}

impl ParameterVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    pub fn in_domain(&self) -> bool {
        self.values
            .iter()
            .zip(&self.transforms)
            .all(|(v, t)| t.in_domain(*v))
    }

    pub fn to_free(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.transforms)
            .map(|(v, t)| t.to_free(*v))
            .collect()
    }
}

/// Normalization used when fitting, without the loading (which is a
/// parameter under the scaled-score scheme).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizationKind {
    KalmanConsistent,
    ScaledScore(ScoreScaling),
}

/// Everything needed to turn a parameter vector into a filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub normalization: NormalizationKind,
    pub poisson_link: PoissonLink,
}

/// Model, transition, normalization and initial state for one parameter
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSetup {
    pub model: AnyModel,
    pub trans: TransitionSpec,
    pub norm: NormalizationScheme,
    pub init: GaussianState,
}

impl ModelSpec {
    /// Kalman-consistent normalization; counts use the log link of the
    /// reference design.
    pub fn new(family: Family) -> Self {
        ModelSpec {
            family,
            normalization: NormalizationKind::KalmanConsistent,
            poisson_link: PoissonLink::Log,
        }
    }

    pub fn with_normalization(mut self, normalization: NormalizationKind) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn with_poisson_link(mut self, link: PoissonLink) -> Self {
        self.poisson_link = link;
        self
    }

    fn variance_param(&self) -> (&'static str, Transform) {
        match self.normalization {
            NormalizationKind::KalmanConsistent => ("q", Transform::Log),
            NormalizationKind::ScaledScore(_) => ("loading", Transform::Log),
        }
    }

    /// Parameter names and transforms in the order used everywhere.
    pub fn layout(&self) -> Vec<(&'static str, Transform)> {
        use Transform::*;
        let var = self.variance_param();
        match self.family {
            Family::StudentTLocation => vec![
                ("c", Identity),
                ("phi", Tanh),
                var,
                ("lambda", Identity),
                ("nu", LogShifted2),
            ],
            Family::GaussianScale => vec![("c", Identity), ("phi", Tanh), var, ("omega", Identity)],
            Family::StudentTScale => vec![
                ("c", Identity),
                ("phi", Tanh),
                var,
                ("omega", Identity),
                ("nu", LogShifted2),
            ],
            Family::Poisson => vec![("c", Identity), ("phi", Tanh), var],
            Family::TwoComponentSv => vec![
                ("phi1", Tanh),
                ("phi2", Tanh),
                ("q11", Log),
                ("q22", Log),
                ("rho12", Tanh),
                ("omega", Identity),
                ("nu", LogShifted2),
            ],
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.layout().iter().map(|(n, _)| n.to_string()).collect()
    }

    /// Parameters held fixed unless the caller says otherwise: the state
    /// intercept of the volatility models, which is not identified jointly
    /// with `omega`.
    pub fn default_fixed(&self) -> Vec<(String, f64)> {
        match self.family {
            Family::GaussianScale | Family::StudentTScale => vec![(String::from("c"), 0.0)],
            _ => Vec::new(),
        }
    }

    /// Wraps natural-coordinate values into a [`ParameterVector`].
    pub fn parameters(&self, values: &[f64]) -> Result<ParameterVector> {
        let layout = self.layout();
        optim::check_dimension(values, layout.len())?;
        Ok(ParameterVector {
            names: layout.iter().map(|(n, _)| n.to_string()).collect(),
            values: values.to_vec(),
            transforms: layout.iter().map(|(_, t)| *t).collect(),
        })
    }

    /// Builds the filter inputs for natural-coordinate parameters.
    pub fn build(&self, theta: &[f64]) -> Result<FilterSetup> {
        let layout = self.layout();
        optim::check_dimension(theta, layout.len())?;
        for ((name, tr), v) in layout.iter().zip(theta) {
            if !tr.in_domain(*v) {
                return Err(Error::param(format!("{name} = {v} is outside its domain")));
            }
        }
        let (model, trans) = match self.family {
            Family::TwoComponentSv => {
                let [phi1, phi2, q11, q22, rho, omega, nu] = theta else {
                    unreachable!()
                };
                let q12 = rho * sqrt(q11 * q22);
                let trans = TransitionSpec::new(
                    Vector::zeros(2),
                    Matrix::from_diagonal(&Vector::from_vec(vec![*phi1, *phi2])),
                    Matrix::from_row_slice(2, 2, &[*q11, q12, q12, *q22]),
                )?;
                (AnyModel::TwoComponentSv(TwoComponentSv::new(*omega, *nu)?), trans)
            }
            family => {
                let (c, phi, var) = (theta[0], theta[1], theta[2]);
                let q = match self.normalization {
                    NormalizationKind::KalmanConsistent => var,
                    NormalizationKind::ScaledScore(_) => 0.0,
                };
                let trans = TransitionSpec::ar1(c, phi, q)?;
                let model = match family {
                    Family::StudentTLocation => {
                        AnyModel::StudentTLocation(StudentTLocation::new(theta[3], theta[4])?)
                    }
                    Family::GaussianScale => AnyModel::GaussianScale(GaussianScale::new(theta[3])?),
                    Family::StudentTScale => {
                        AnyModel::StudentTScale(StudentTScale::new(theta[3], theta[4])?)
                    }
                    Family::Poisson => AnyModel::Poisson(PoissonDuration::new(self.poisson_link)),
                    Family::TwoComponentSv => unreachable!(),
                };
                (model, trans)
            }
        };
        let (norm, init) = match self.normalization {
            NormalizationKind::KalmanConsistent => {
                (NormalizationScheme::KalmanConsistent, trans.stationary_state()?)
            }
            NormalizationKind::ScaledScore(scaling) => {
                if self.family.state_dim() > 1 {
                    return Err(Error::Identification(String::from(
                        "the scaled-score loading is not identified with more states than signals",
                    )));
                }
                let a = linalg::stationary_mean(&trans.t, &trans.c)?;
                let init = GaussianState::new(a, Matrix::zeros(1, 1))?;
                let norm = NormalizationScheme::ScaledScore {
                    loading: Matrix::from_element(1, 1, theta[2]),
                    scaling,
                };
                (norm, init)
            }
        };
        Ok(FilterSetup {
            model,
            trans,
            norm,
            init,
        })
    }

    /// Reference design values in layout order. Under the scaled-score
    /// normalization the loading has no reference value and is `None`.
    pub fn reference_values(&self) -> Vec<Option<f64>> {
        let (model, trans) = self.family.reference_design();
        let q = &trans.q;
        let model_params: Vec<f64> = match model {
            AnyModel::StudentTLocation(m) => vec![m.lambda, m.nu],
            AnyModel::GaussianScale(m) => vec![m.omega],
            AnyModel::StudentTScale(m) => vec![m.omega, m.nu],
            AnyModel::TwoComponentSv(m) => vec![m.omega, m.nu],
            AnyModel::Poisson(_) | AnyModel::LinearGaussian(_) => Vec::new(),
        };
        let mut out: Vec<Option<f64>> = match self.family {
            Family::TwoComponentSv => vec![
                Some(trans.t[(0, 0)]),
                Some(trans.t[(1, 1)]),
                Some(q[(0, 0)]),
                Some(q[(1, 1)]),
                Some(q[(0, 1)] / sqrt(q[(0, 0)] * q[(1, 1)])),
            ],
            _ => {
                let var = match self.normalization {
                    NormalizationKind::KalmanConsistent => Some(q[(0, 0)]),
                    NormalizationKind::ScaledScore(_) => None,
                };
                vec![Some(trans.c[0]), Some(trans.t[(0, 0)]), var]
            }
        };
        out.extend(model_params.into_iter().map(Some));
        out
    }

    /// Data-driven default start in natural coordinates.
    pub fn default_start(&self, y: &[Vector]) -> Vec<f64> {
        let first: Vec<f64> = y.iter().map(|v| v[0]).collect();
        let mean = stats::mean(&first);
        let var = stats::variance(&first).max(1e-8);
        let phi = 0.95;
        let var_start = match self.normalization {
            NormalizationKind::KalmanConsistent => 0.01,
            NormalizationKind::ScaledScore(_) => 0.05,
        };
        match self.family {
            Family::StudentTLocation => vec![(1.0 - phi) * mean, phi, var_start, ln(0.5 * var), 8.0],
            Family::GaussianScale => vec![0.0, phi, var_start, ln(var)],
            Family::StudentTScale => vec![0.0, phi, var_start, ln(var), 8.0],
            Family::Poisson => {
                let level = match self.poisson_link {
                    PoissonLink::Identity => mean,
                    PoissonLink::Log => ln(mean.max(0.05)),
                };
                vec![(1.0 - phi) * level, phi, var_start]
            }
            Family::TwoComponentSv => vec![0.95, 0.5, 0.01, 0.05, 0.0, ln(var), 8.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Number of optimizer starts; the first is the default start, the rest
    /// are perturbations of it.
    pub starts: usize,
    pub seed: u64,
    pub optimizer: OptimOptions,
    /// Overrides the default first start (natural coordinates).
    pub start: Option<Vec<f64>>,
    /// Parameters held at given values. `None` uses
    /// [`ModelSpec::default_fixed`].
    pub fixed: Option<Vec<(String, f64)>>,
    /// Standard deviation of start perturbations in free coordinates.
    pub perturbation: f64,
    pub filter: SdOptions,
    pub compute_covariance: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            starts: 5,
            seed: 0,
            optimizer: OptimOptions::default(),
            start: None,
            fixed: None,
            perturbation: 0.3,
            filter: SdOptions::default(),
            compute_covariance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub params: ParameterVector,
    /// Names of the parameters that were held fixed.
    pub fixed: Vec<String>,
    pub loglik: f64,
    /// Asymptotic covariance in natural coordinates; rows and columns of
    /// fixed parameters are zero.
    pub covariance: Matrix,
    pub std_errors: Vec<f64>,
    pub diagnostics: Vec<StartDiagnostics>,
    pub best_start: usize,
    pub n_obs: usize,
}

impl FitResult {
    pub fn setup(&self) -> Result<FilterSetup> {
        self.spec.build(&self.params.values)
    }
}

/// Log-likelihood of the score-driven filter at natural-coordinate `theta`.
pub fn loglik_at(spec: &ModelSpec, theta: &[f64], y: &[Vector], opts: &SdOptions) -> Result<f64> {
    let s = spec.build(theta)?;
    sd_filter_loglik(&s.model, &s.trans, &s.norm, y, &s.init, opts)
}

struct Problem<'a> {
    spec: &'a ModelSpec,
    y: &'a [Vector],
    opts: SdOptions,
    transforms: Vec<Transform>,
    /// Natural values with fixed entries filled in.
    template: Vec<f64>,
    free: Vec<usize>,
}

impl Problem<'_> {
    fn natural(&self, x: &[f64]) -> Vec<f64> {
        let mut theta = self.template.clone();
        for (&i, &v) in self.free.iter().zip(x) {
            theta[i] = self.transforms[i].to_natural(v);
        }
        theta
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let theta = self.natural(x);
        match loglik_at(self.spec, &theta, self.y, &self.opts) {
            Ok(ll) if ll.is_finite() => -ll / self.y.len() as f64,
            _ => f64::INFINITY,
        }
    }
}

/// Information estimate `sum_t g_t g_t'` from central-difference gradients
/// of the per-step log-likelihood over the `free` parameters.
fn score_outer_product(
    spec: &ModelSpec,
    theta: &[f64],
    free: &[usize],
    y: &[Vector],
    opts: &SdOptions,
) -> Result<Matrix> {
    let step_ll = |t: &[f64]| -> Result<Vec<f64>> {
        let s = spec.build(t)?;
        let run = sd_filter(&s.model, &s.trans, &s.norm, y, &s.init, opts)?;
        Ok(run.steps.iter().map(|st| st.loglik).collect())
    };
    let k = free.len();
    let mut grads = vec![vec![0.0; k]; y.len()];
    for (a, &i) in free.iter().enumerate() {
        let h = 1e-4_f64.max(1e-4 * theta[i].abs());
        let mut up = theta.to_vec();
        let mut dn = theta.to_vec();
        up[i] += h;
        dn[i] -= h;
        let (lu, ld) = (step_ll(&up)?, step_ll(&dn)?);
        for (g, (u, d)) in grads.iter_mut().zip(lu.iter().zip(&ld)) {
            g[a] = (u - d) / (2.0 * h);
        }
    }
    let mut info = Matrix::zeros(k, k);
    for g in &grads {
        let g = Vector::from_column_slice(g);
        info += &g * g.transpose();
    }
    if !linalg::all_finite(&info) {
        return Err(Error::EstimationFailure {
            reason: String::from("per-step scores are not finite at the estimate"),
            starts: Vec::new(),
        });
    }
    Ok(info)
}

/// Fits the static parameters by maximizing the score-driven likelihood
/// over several starts; BFGS first, Nelder-Mead when BFGS fails.
pub fn fit(spec: &ModelSpec, y: &[Vector], config: &FitConfig) -> Result<FitResult> {
    if y.len() < MIN_SERIES_LENGTH {
        return Err(Error::input(format!(
            "fitting needs at least {MIN_SERIES_LENGTH} observations, got {}",
            y.len()
        )));
    }
    if config.starts == 0 {
        return Err(Error::input("at least one optimizer start is required"));
    }
    let layout = spec.layout();
    let k = layout.len();
    let transforms: Vec<Transform> = layout.iter().map(|(_, t)| *t).collect();
    let mut template = match &config.start {
        Some(s) => {
            optim::check_dimension(s, k)?;
            s.clone()
        }
        None => spec.default_start(y),
    };
    let fixed = config.fixed.clone().unwrap_or_else(|| spec.default_fixed());
    let mut is_fixed = vec![false; k];
    for (name, value) in &fixed {
        let i = layout
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::input(format!("unknown parameter '{name}' for {}", spec.family)))?;
        template[i] = *value;
        is_fixed[i] = true;
    }
    for (i, ((name, tr), v)) in layout.iter().zip(&template).enumerate() {
        if !tr.in_domain(*v) {
            return Err(Error::param(format!(
                "start value {name} = {v} is outside its domain (parameter {i})"
            )));
        }
    }
    let free: Vec<usize> = (0..k).filter(|&i| !is_fixed[i]).collect();
    let problem = Problem {
        spec,
        y,
        opts: config.filter,
        transforms: transforms.clone(),
        template: template.clone(),
        free: free.clone(),
    };
    let x0: Vec<f64> = free.iter().map(|&i| transforms[i].to_free(template[i])).collect();

    let mut rng = seeded(derive_seed(config.seed, 0x5eed));
    let mut diagnostics = Vec::with_capacity(config.starts);
    let mut best: Option<(usize, optim::Minimum)> = None;
    for start in 0..config.starts {
        let xs: Vec<f64> = if start == 0 {
            x0.clone()
        } else {
            x0.iter()
                .map(|v| v + config.perturbation * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        if !problem.objective(&xs).is_finite() {
            log::info!("start {start} discarded: objective not finite");
            diagnostics.push(StartDiagnostics {
                start,
                iterations: 0,
                objective: f64::INFINITY,
                gradient_norm: f64::NAN,
                converged: false,
                message: String::from("objective not finite at start"),
            });
            continue;
        }
        let mut result = if xs.is_empty() {
            optim::Minimum {
                x: Vec::new(),
                value: problem.objective(&xs),
                iterations: 0,
                evaluations: 1,
                gradient_norm: 0.0,
                converged: true,
                message: String::from("no free parameters"),
            }
        } else {
            optim::bfgs(|x: &[f64]| problem.objective(x), &xs, &config.optimizer)
        };
        if !result.converged {
            log::debug!("start {start}: BFGS stopped ({}), trying Nelder-Mead", result.message);
            let nm = optim::nelder_mead(
                |x: &[f64]| problem.objective(x),
                &xs,
                0.2,
                2000 * xs.len().max(1),
                config.optimizer.relative_tolerance,
            );
            if nm.converged || nm.value < result.value {
                result = nm;
            }
        }
        diagnostics.push(StartDiagnostics {
            start,
            iterations: result.iterations,
            objective: result.value,
            gradient_norm: result.gradient_norm,
            converged: result.converged,
            message: result.message.clone(),
        });
        if result.converged && result.value.is_finite() {
            let better = best.as_ref().is_none_or(|(_, b)| result.value < b.value);
            if better {
                best = Some((start, result));
            }
        }
    }
    let Some((best_start, best)) = best else {
        return Err(Error::EstimationFailure {
            reason: format!("no optimizer start converged for {}", spec.family),
            starts: diagnostics,
        });
    };
    let theta = problem.natural(&best.x);
    let loglik = -best.value * y.len() as f64;
    let loglik = loglik_at(spec, &theta, y, &config.filter).unwrap_or(loglik);

    let mut covariance = Matrix::zeros(k, k);
    if config.compute_covariance && !free.is_empty() {
        let theta_free: Vec<f64> = free.iter().map(|&i| theta[i]).collect();
        let neg_ll = |z: &[f64]| {
            let mut full = theta.clone();
            for (&i, &v) in free.iter().zip(z) {
                full[i] = v;
            }
            match loglik_at(spec, &full, y, &config.filter) {
                Ok(ll) => -ll,
                Err(_) => f64::NAN,
            }
        };
        let hess = optim::numerical_hessian(neg_ll, &theta_free, false)?;
        // A covariance repair inside the filter puts a kink in the
        // likelihood, and second differences across it are meaningless.
        let info = if linalg::min_eigenvalue(&hess) > 0.0 {
            hess
        } else {
            log::warn!("numerical Hessian is indefinite; using the outer product of per-step scores");
            score_outer_product(spec, &theta, &free, y, &config.filter)?
        };
        let inv = linalg::floored_inverse(&info, linalg::EIGEN_FLOOR);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                covariance[(i, j)] = inv[(a, b)];
            }
        }
    }
    let std_errors = (0..k).map(|i| sqrt(covariance[(i, i)].max(0.0))).collect();
    Ok(FitResult {
        spec: *spec,
        params: spec.parameters(&theta)?,
        fixed: fixed.into_iter().map(|(n, _)| n).collect(),
        loglik,
        covariance,
        std_errors,
        diagnostics,
        best_start,
        n_obs: y.len(),
    })
}

#[cfg(test)]
mod tests;
