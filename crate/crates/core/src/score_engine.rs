//! Score-driven filtering, updating and smoothing for arbitrary
//! twice-differentiable observation densities.
//!
//! The recursions are those of the score-form Kalman filter in
//! [`crate::lgss`], with the score and Hessian of the Gaussian predictive
//! density replaced by the score and Hessian of `log p(y_t | alpha_t)`
//! evaluated at the predictive filter `a_t`:
//!
//! ```text
//! a_{t|t} = a_t + P_t grad_t
//! a_{t+1} = c + T a_t + T P_t grad_t
//! P_{t|t} = P_t + P_t hess_t P_t
//! P_{t+1} = T P_t (T + T P_t hess_t)' + Q  =  T P_{t|t} T' + Q
//! ```
//!
//! Under [`NormalizationScheme::ScaledScore`] the covariance recursion is
//! replaced by `P_t = T^-1 A S_t`, where `S_t` scales the score, so the
//! predictive filter becomes the usual score-driven recursion
//! `a_{t+1} = c + T a_t + A S_t grad_t`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::lgss::{self, BackwardInput, GaussianState, SmootherRun};
use crate::linalg;
use crate::{Matrix, Vector};

/// Score, Hessian and log-density of a scalar observation at a scalar state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarEval {
    pub log_density: f64,
    pub score: f64,
    pub hessian: f64,
}

/// Conditional observation density `p(y | alpha)` with its derivatives with
/// respect to the state. Static parameters are carried by the implementor.
///
/// Observations and states are passed as slices so that the particle filter
/// can evaluate densities on flat particle storage without allocating.
pub trait ObservationModel {
    /// Dimension `m` of the state.
    fn state_dim(&self) -> usize;

    /// Dimension `p` of one observation.
    fn obs_dim(&self) -> usize;

    fn log_density(&self, y: &[f64], a: &[f64]) -> f64;

    /// Gradient of [`Self::log_density`] with respect to `a`.
    fn score(&self, y: &[f64], a: &[f64]) -> Vector;

    /// Hessian of [`Self::log_density`] with respect to `a`.
    fn hessian(&self, y: &[f64], a: &[f64]) -> Matrix;

    /// Conditional Fisher information at `a`, when available in closed form.
    fn information(&self, _a: &[f64]) -> Option<Matrix> {
        None
    }

    /// The mapped parameter that enters the density, e.g. `omega + Z a`.
    fn signal(&self, a: &[f64]) -> Vector;

    fn simulate_observation(&self, a: &[f64], rng: &mut dyn RngCore) -> Vector;

    /// Score normalization the model uses by default under
    /// [`ScoreScaling::ModelDefault`].
    fn default_scaling(&self, a: &[f64]) -> Option<Matrix> {
        self.information(a)
            .and_then(|info| linalg::spd_power(&info, -1.0).ok())
    }

    /// Whether `y` lies in the support of the observation density.
    fn check_observation(&self, _y: &[f64]) -> bool {
        true
    }

    /// Moves `a` into the region where the density is defined. Returns true
    /// when `a` was modified.
    fn clamp_state(&self, _a: &mut [f64]) -> bool {
        false
    }

    /// Log-density of the data-generating law at state `a`. Differs from
    /// [`log_density`](Self::log_density) only for models whose filter
    /// evaluates a floored density.
    fn dgp_log_density(&self, y: &[f64], a: &[f64]) -> f64 {
        self.log_density(y, a)
    }

    /// Log-density used by the filter at step `t` given the predictive state.
    /// Defaults to plugging in the predictive mean; a linear-Gaussian model
    /// overrides this with the exact predictive density.
    fn predictive_log_density(&self, y: &[f64], state: &GaussianState) -> f64 {
        self.log_density(y, state.a.as_slice())
    }

    fn predictive_score(&self, y: &[f64], state: &GaussianState) -> Vector {
        self.score(y, state.a.as_slice())
    }

    fn predictive_hessian(&self, y: &[f64], state: &GaussianState) -> Matrix {
        self.hessian(y, state.a.as_slice())
    }

    /// Scalar version of the three predictive quantities for models with a
    /// scalar state and a scalar observation. The default goes through the
    /// vector methods; models override it to avoid allocations in the
    /// likelihood loop.
    fn scalar_predictive(&self, y: f64, a: f64, p: f64) -> ScalarEval {
        let state = GaussianState {
            a: Vector::from_element(1, a),
            p: Matrix::from_element(1, 1, p),
        };
        let ys = [y];
        ScalarEval {
            log_density: self.predictive_log_density(&ys, &state),
            score: self.predictive_score(&ys, &state)[0],
            hessian: self.predictive_hessian(&ys, &state)[(0, 0)],
        }
    }
}

/// Linear state transition `alpha_{t+1} = c + T alpha_t + eta_t`,
/// `eta_t ~ N(0, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSpec {
    pub c: Vector,
    pub t: Matrix,
    pub q: Matrix,
}

impl TransitionSpec {
    pub fn new(c: Vector, t: Matrix, q: Matrix) -> Result<Self> {
        let m = t.nrows();
        if m == 0 || t.ncols() != m || q.shape() != (m, m) || c.len() != m {
            return Err(Error::input(format!(
                "inconsistent transition dimensions: c {}, T {:?}, Q {:?}",
                c.len(),
                t.shape(),
                q.shape()
            )));
        }
        if !linalg::all_finite(&t) || !linalg::all_finite(&q) || !c.iter().all(|v| v.is_finite()) {
            return Err(Error::param("transition parameters must be finite"));
        }
        if linalg::asymmetry(&q) > 1e-12 || !linalg::is_psd(&q, linalg::PSD_TOLERANCE) {
            return Err(Error::param("Q must be symmetric positive semidefinite"));
        }
        Ok(TransitionSpec { c, t, q })
    }

    /// Scalar AR(1) transition `alpha' = c + phi alpha + eta`, `eta ~ N(0, q)`.
    pub fn ar1(c: f64, phi: f64, q: f64) -> Result<Self> {
        Self::new(
            Vector::from_element(1, c),
            Matrix::from_element(1, 1, phi),
            Matrix::from_element(1, 1, q),
        )
    }

    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    /// Stationary distribution of the state; fails for non-stable `T`.
    pub fn stationary_state(&self) -> Result<GaussianState> {
        let p = linalg::discrete_lyapunov(&self.t, &self.q)?;
        let a = linalg::stationary_mean(&self.t, &self.c)?;
        GaussianState::new(a, p)
    }
}

/// How the score is scaled under [`NormalizationScheme::ScaledScore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreScaling {
    /// The model's own normalization ([`ObservationModel::default_scaling`]).
    ModelDefault,
    /// Information matrix raised to `-d`, `d` in `{0, 0.5, 1}`.
    InverseInformation { d: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormalizationScheme {
    /// The covariance follows the score-form Kalman recursion.
    KalmanConsistent,
    /// The covariance is tied to the score scaling, `P_t = T^-1 A S_t`.
    ScaledScore { loading: Matrix, scaling: ScoreScaling },
}

impl NormalizationScheme {
    pub fn is_scaled(&self) -> bool {
        matches!(self, NormalizationScheme::ScaledScore { .. })
    }

    fn validate(&self, trans: &TransitionSpec) -> Result<()> {
        let NormalizationScheme::ScaledScore { loading, scaling } = self else {
            return Ok(());
        };
        let m = trans.dim();
        if loading.shape() != (m, m) {
            return Err(Error::input(format!(
                "loading matrix must be {m}x{m}, got {:?}",
                loading.shape()
            )));
        }
        if !linalg::all_finite(loading) || loading.rank(1e-12) < m {
            return Err(Error::param("loading matrix must have full column rank"));
        }
        if trans.t.clone().try_inverse().is_none() {
            return Err(Error::param("scaled-score normalization needs an invertible T"));
        }
        if let ScoreScaling::InverseInformation { d } = scaling {
            if ![0.0, 0.5, 1.0].contains(d) {
                return Err(Error::param(format!("scaling exponent must be 0, 0.5 or 1, got {d}")));
            }
        }
        Ok(())
    }
}

/// Curvature used in the covariance recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceUpdate {
    /// Hessian of the log-density.
    #[default]
    Hessian,
    /// Negative outer product of the score, `-grad grad'`.
    SquaredScore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdOptions {
    pub variance_update: VarianceUpdate,
    /// Value assigned to negative eigenvalues of repaired covariances.
    pub eigen_floor: f64,
    /// Fraction of repaired steps above which a warning is logged.
    pub repair_warn_fraction: f64,
}

impl Default for SdOptions {
    fn default() -> Self {
        SdOptions {
            variance_update: VarianceUpdate::Hessian,
            eigen_floor: linalg::EIGEN_FLOOR,
            repair_warn_fraction: 0.01,
        }
    }
}

/// One step of the score-driven filter.
#[derive(Debug, Clone, PartialEq)]
pub struct SdStep {
    /// Predictive state `(a_t, P_t)`.
    pub pred: GaussianState,
    /// Update state `(a_{t|t}, P_{t|t})`.
    pub upd: GaussianState,
    pub score: Vector,
    /// Curvature used in the covariance recursion (Hessian, or `-grad grad'`).
    pub hessian: Matrix,
    /// `log p(y_t | alpha_t)` evaluated at `a_t`.
    pub loglik: f64,
    /// A covariance had to be repaired to stay positive semidefinite.
    pub repaired: bool,
    /// The evaluation point was moved into the model's domain.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdFilterRun {
    pub steps: Vec<SdStep>,
    /// Prediction for the step after the last observation.
    pub next: GaussianState,
    pub scaled: bool,
    pub repairs: usize,
    pub clamps: usize,
}

impl SdFilterRun {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Sum of the per-step contributions, without the finiteness check of
    /// [`sd_loglik`].
    pub fn loglik(&self) -> f64 {
        self.steps.iter().map(|s| s.loglik).sum()
    }
}

fn check_observations<M: ObservationModel + ?Sized>(model: &M, y: &[Vector]) -> Result<()> {
    let p = model.obs_dim();
    for (t, obs) in y.iter().enumerate() {
        if obs.len() != p {
            return Err(Error::input(format!(
                "observation {t} has length {}, expected {p}",
                obs.len()
            )));
        }
        if !obs.iter().all(|v| v.is_finite()) {
            return Err(Error::input(format!("observation {t} is missing or not finite")));
        }
        if !model.check_observation(obs.as_slice()) {
            return Err(Error::input(format!(
                "observation {t} = {:?} is outside the support of the model",
                obs.as_slice()
            )));
        }
    }
    Ok(())
}

fn check_setup<M: ObservationModel + ?Sized>(
    model: &M,
    trans: &TransitionSpec,
    norm: &NormalizationScheme,
    y: &[Vector],
    init: &GaussianState,
) -> Result<()> {
    let m = trans.dim();
    if model.state_dim() != m || init.dim() != m {
        return Err(Error::input(format!(
            "state dimensions disagree: model {}, transition {m}, initial state {}",
            model.state_dim(),
            init.dim()
        )));
    }
    norm.validate(trans)?;
    check_observations(model, y)
}

/// `P_t = T^-1 A S_t` with `S_t` evaluated at `a`.
fn scaled_covariance<M: ObservationModel + ?Sized>(
    model: &M,
    trans: &TransitionSpec,
    loading: &Matrix,
    scaling: ScoreScaling,
    a: &[f64],
    step: usize,
) -> Result<Matrix> {
    let s = match scaling {
        ScoreScaling::ModelDefault => model
            .default_scaling(a)
            .ok_or_else(|| Error::numerical(step, "model has no default score scaling"))?,
        ScoreScaling::InverseInformation { d } => {
            let info = model
                .information(a)
                .ok_or_else(|| Error::numerical(step, "model provides no information matrix"))?;
            linalg::spd_power(&info, -d).map_err(|_| {
                Error::numerical(step, format!("information matrix not positive definite at {a:?}"))
            })?
        }
    };
    let t_inv = trans
        .t
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::param("scaled-score normalization needs an invertible T"))?;
    Ok(t_inv * loading * s)
}

struct Tracker {
    repairs: usize,
    clamps: usize,
    floor: f64,
}

impl Tracker {
    fn repair(&self, m: Matrix) -> (Matrix, bool) {
        linalg::clip_psd(&m, self.floor)
    }
}

fn non_finite(step: usize, what: &str, a: &[f64]) -> Error {
    Error::numerical(step, format!("non-finite {what} at predictive state {a:?}"))
}

/// Score-driven filter. See the module documentation for the recursions.
///
/// Under [`NormalizationScheme::ScaledScore`] the covariance of `init` is
/// ignored and replaced by `T^-1 A S_1`.
pub fn sd_filter<M: ObservationModel + ?Sized>(
    model: &M,
    trans: &TransitionSpec,
    norm: &NormalizationScheme,
    y: &[Vector],
    init: &GaussianState,
    opts: &SdOptions,
) -> Result<SdFilterRun> {
    check_setup(model, trans, norm, y, init)?;
    let mut steps = Vec::with_capacity(y.len());
    let mut tracker = Tracker {
        repairs: 0,
        clamps: 0,
        floor: opts.eigen_floor,
    };
    let next = if trans.dim() == 1 && model.obs_dim() == 1 {
        scalar_pass(model, trans, norm, y, init, opts, &mut tracker, |s| steps.push(s))?
    } else {
        matrix_pass(model, trans, norm, y, init, opts, &mut tracker, |s| steps.push(s))?
    };
    warn_on_repairs(&tracker, y.len(), opts);
    Ok(SdFilterRun {
        steps,
        next,
        scaled: norm.is_scaled(),
        repairs: tracker.repairs,
        clamps: tracker.clamps,
    })
}

/// Log-likelihood of the score-driven filter without storing the per-step
/// output. Equals `sd_loglik(&sd_filter(..)?)` exactly.
pub fn sd_filter_loglik<M: ObservationModel + ?Sized>(
    model: &M,
    trans: &TransitionSpec,
    norm: &NormalizationScheme,
    y: &[Vector],
    init: &GaussianState,
    opts: &SdOptions,
) -> Result<f64> {
    check_setup(model, trans, norm, y, init)?;
    let mut tracker = Tracker {
        repairs: 0,
        clamps: 0,
        floor: opts.eigen_floor,
    };
    let mut total = 0.0;
    let mut bad = None;
    let mut t = 0usize;
    let record = |s: SdStep| {
        if bad.is_none() && !s.loglik.is_finite() {
            bad = Some(t);
        }
        total += s.loglik;
        t += 1;
    };
    if trans.dim() == 1 && model.obs_dim() == 1 {
        scalar_pass(model, trans, norm, y, init, opts, &mut tracker, record)?;
    } else {
        matrix_pass(model, trans, norm, y, init, opts, &mut tracker, record)?;
    }
    match bad {
        Some(step) => Err(Error::numerical(step, "non-finite log-likelihood contribution")),
        None => Ok(total),
    }
}

fn warn_on_repairs(tracker: &Tracker, n: usize, opts: &SdOptions) {
    if n > 0 && tracker.repairs as f64 > opts.repair_warn_fraction * n as f64 {
        log::warn!(
            "covariance repaired on {} of {} steps ({:.2}%)",
            tracker.repairs,
            n,
            100.0 * tracker.repairs as f64 / n as f64
        );
    }
    if tracker.clamps > 0 {
        log::debug!("state clamped into the model domain on {} of {} steps", tracker.clamps, n);
    }
}

#[allow(clippy::too_many_arguments)]
fn matrix_pass<M: ObservationModel + ?Sized, F: FnMut(SdStep)>(
    model: &M,
    trans: &TransitionSpec,
    norm: &NormalizationScheme,
    y: &[Vector],
    init: &GaussianState,
    opts: &SdOptions,
    tracker: &mut Tracker,
    mut record: F,
) -> Result<GaussianState> {
    let mut pred = init.clone();
    if let NormalizationScheme::ScaledScore { loading, scaling } = norm {
        let mut a = pred.a.clone();
        model.clamp_state(a.as_mut_slice());
        pred.p = scaled_covariance(model, trans, loading, *scaling, a.as_slice(), 0)?;
    }
    let mut pred_repaired = {
        let (p, r) = tracker.repair(pred.p.clone());
        pred.p = p;
        r
    };
    for (t, obs) in y.iter().enumerate() {
        let mut eval_state = pred.clone();
        let clamped = model.clamp_state(eval_state.a.as_mut_slice());
        if clamped {
            tracker.clamps += 1;
        }
        let ys = obs.as_slice();
        let loglik = model.predictive_log_density(ys, &eval_state);
        let score = model.predictive_score(ys, &eval_state);
        if !score.iter().all(|v| v.is_finite()) {
            return Err(non_finite(t, "score", eval_state.a.as_slice()));
        }
        let hessian = match opts.variance_update {
            VarianceUpdate::Hessian => linalg::symmetrize(&model.predictive_hessian(ys, &eval_state)),
            VarianceUpdate::SquaredScore => -(&score * score.transpose()),
        };
        if !linalg::all_finite(&hessian) {
            return Err(non_finite(t, "Hessian", eval_state.a.as_slice()));
        }

        let (mut upd, mut next) =
            lgss::score_update(&trans.c, &trans.t, &trans.q, &pred, &score, &hessian);
        let (upd_p, upd_repaired) = tracker.repair(upd.p);
        upd.p = upd_p;
        let next_repaired = match norm {
            NormalizationScheme::KalmanConsistent => {
                if upd_repaired {
                    next.p = linalg::symmetrize(&(&trans.t * &upd.p * trans.t.transpose() + &trans.q));
                }
                let (p, r) = tracker.repair(next.p);
                next.p = p;
                r
            }
            NormalizationScheme::ScaledScore { loading, scaling } => {
                let mut a = next.a.clone();
                model.clamp_state(a.as_mut_slice());
                let p = scaled_covariance(model, trans, loading, *scaling, a.as_slice(), t + 1)?;
                let (p, r) = tracker.repair(linalg::symmetrize(&p));
                next.p = p;
                r
            }
        };
        if !next.a.iter().all(|v| v.is_finite()) || !linalg::all_finite(&next.p) {
            return Err(non_finite(t, "prediction", eval_state.a.as_slice()));
        }
        let repaired = pred_repaired || upd_repaired;
        if repaired {
            tracker.repairs += 1;
        }
        pred_repaired = next_repaired;
        record(SdStep {
            pred: core::mem::replace(&mut pred, next),
            upd,
            score,
            hessian,
            loglik,
            repaired,
            clamped,
        });
    }
    Ok(pred)
}

/// Same recursion as [`matrix_pass`] for `m = p = 1`, on plain floats.
#[allow(clippy::too_many_arguments)]
fn scalar_pass<M: ObservationModel + ?Sized, F: FnMut(SdStep)>(
    model: &M,
    trans: &TransitionSpec,
    norm: &NormalizationScheme,
    y: &[Vector],
    init: &GaussianState,
    opts: &SdOptions,
    tracker: &mut Tracker,
    mut record: F,
) -> Result<GaussianState> {
    let (c, phi, q) = (trans.c[0], trans.t[(0, 0)], trans.q[(0, 0)]);
    let floor = tracker.floor;
    let clip = |v: f64| if v < 0.0 { (floor, true) } else { (v, false) };
    let scaled_p = |a: f64, step: usize| -> Result<f64> {
        let NormalizationScheme::ScaledScore { loading, scaling } = norm else {
            unreachable!()
        };
        let mut ac = [a];
        model.clamp_state(&mut ac);
        Ok(scaled_covariance(model, trans, loading, *scaling, &ac, step)?[(0, 0)])
    };

    let mut a = init.a[0];
    let mut p = if norm.is_scaled() { scaled_p(a, 0)? } else { init.p[(0, 0)] };
    let (p0, mut pred_repaired) = clip(p);
    p = p0;
    for (t, obs) in y.iter().enumerate() {
        let mut ae = [a];
        let clamped = model.clamp_state(&mut ae);
        if clamped {
            tracker.clamps += 1;
        }
        let ev = model.scalar_predictive(obs[0], ae[0], p);
        if !ev.score.is_finite() {
            return Err(non_finite(t, "score", &ae));
        }
        let h = match opts.variance_update {
            VarianceUpdate::Hessian => ev.hessian,
            VarianceUpdate::SquaredScore => -(ev.score * ev.score),
        };
        if !h.is_finite() {
            return Err(non_finite(t, "Hessian", &ae));
        }
        let p_grad = p * ev.score;
        let upd_a = a + p_grad;
        let (upd_p, upd_repaired) = clip(p + p * h * p);
        let next_a = c + phi * a + phi * p_grad;
        let (next_p, next_repaired) = if norm.is_scaled() {
            clip(scaled_p(next_a, t + 1)?)
        } else if upd_repaired {
            clip(phi * upd_p * phi + q)
        } else {
            let tp = phi * p;
            clip(tp * (phi + tp * h) + q)
        };
        if !next_a.is_finite() || !next_p.is_finite() {
            return Err(non_finite(t, "prediction", &ae));
        }
        let repaired = pred_repaired || upd_repaired;
        if repaired {
            tracker.repairs += 1;
        }
        pred_repaired = next_repaired;
        record(SdStep {
            pred: scalar_state(a, p),
            upd: scalar_state(upd_a, upd_p),
            score: Vector::from_element(1, ev.score),
            hessian: Matrix::from_element(1, 1, h),
            loglik: ev.log_density,
            repaired,
            clamped,
        });
        a = next_a;
        p = next_p;
    }
    Ok(scalar_state(a, p))
}

fn scalar_state(a: f64, p: f64) -> GaussianState {
    GaussianState {
        a: Vector::from_element(1, a),
        p: Matrix::from_element(1, 1, p),
    }
}

/// Score-driven smoother: the score-form Kalman backward pass applied to the
/// scores and Hessians stored in `run`. Smoothed covariances that lose
/// positive semi-definiteness are repaired and counted.
pub fn sd_smoother<M: ObservationModel + ?Sized>(
    model: &M,
    trans: &TransitionSpec,
    run: &SdFilterRun,
) -> Result<SmootherRun> {
    let m = trans.dim();
    let p = model.obs_dim();
    if run.scaled && m > p {
        return Err(Error::Identification(format!(
            "with {m} states and {p} signals the scaled-score loading only identifies P Z'; \
             use the Kalman-consistent normalization for smoothing"
        )));
    }
    for (t, s) in run.steps.iter().enumerate() {
        if s.pred.dim() != m || s.score.len() != m || s.hessian.shape() != (m, m) {
            return Err(Error::input(format!(
                "filter output at step {t} does not match the transition dimension {m}"
            )));
        }
    }
    let inputs = run.steps.iter().map(|s| BackwardInput {
        pred: &s.pred,
        score: &s.score,
        hessian: &s.hessian,
    });
    let out = lgss::score_backward(&trans.t, inputs, true);
    if out.psd_repairs > 0 {
        log::debug!("smoothed covariance repaired on {} of {} steps", out.psd_repairs, run.len());
    }
    Ok(out)
}

/// Approximate log-likelihood `sum_t log p(y_t | alpha_t)` at `a_t`.
pub fn sd_loglik(run: &SdFilterRun) -> Result<f64> {
    let mut total = 0.0;
    for (t, s) in run.steps.iter().enumerate() {
        if !s.loglik.is_finite() {
            return Err(Error::numerical(t, "non-finite log-likelihood contribution"));
        }
        total += s.loglik;
    }
    Ok(total)
}

/// Renders a short description of a normalization for logs and reports.
pub fn describe_normalization(norm: &NormalizationScheme) -> String {
    match norm {
        NormalizationScheme::KalmanConsistent => String::from("kalman-consistent"),
        NormalizationScheme::ScaledScore { scaling, .. } => match scaling {
            ScoreScaling::ModelDefault => String::from("scaled-score (model default)"),
            ScoreScaling::InverseInformation { d } => format!("scaled-score (information^-{d})"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgss::{kalman_filter, kalman_smoother, random_stable_system};
    use crate::models::{
        simulate_ssm, Family, GaussianScale, LinearGaussian, PoissonDuration, PoissonLink,
        StudentTLocation, TwoComponentSv,
    };
    use crate::rng::seeded;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn scalar_obs(xs: &[f64]) -> Vec<Vector> {
        xs.iter().map(|&x| Vector::from_element(1, x)).collect()
    }

    #[test]
    fn gaussian_reduction_matches_kalman() {
        let mut rng = seeded(31);
        for trial in 0..12 {
            let m = 1 + trial % 3;
            let p = 1 + (trial / 3) % 3;
            let sys = random_stable_system(&mut rng, m, p);
            let init = sys.stationary_state().unwrap();
            let (_, y) = sys.simulate(&init, 80, &mut rng);
            let model = LinearGaussian::new(sys.z.clone(), sys.h.clone()).unwrap();
            let trans = TransitionSpec::new(sys.c.clone(), sys.t.clone(), sys.q.clone()).unwrap();
            let norm = NormalizationScheme::KalmanConsistent;
            let opts = SdOptions::default();
            let sd = sd_filter(&model, &trans, &norm, &y, &init, &opts).unwrap();
            let kf = kalman_filter(&sys, &y, &init).unwrap();
            assert!(linalg::relative_error_scalar(sd_loglik(&sd).unwrap(), kf.loglik()) < 1e-10);
            let fast = sd_filter_loglik(&model, &trans, &norm, &y, &init, &opts).unwrap();
            assert_eq!(fast, sd_loglik(&sd).unwrap());
            for (a, b) in sd.steps.iter().zip(&kf.steps) {
                assert!(linalg::relative_error_vec(&a.upd.a, &b.upd.a) < 1e-10);
                assert!(linalg::relative_error(&a.upd.p, &b.upd.p) < 1e-10);
                assert!(linalg::relative_error_vec(&a.pred.a, &b.pred.a) < 1e-10);
                assert!(linalg::relative_error(&a.pred.p, &b.pred.p) < 1e-10);
            }
            let ss = sd_smoother(&model, &trans, &sd).unwrap();
            let ks = kalman_smoother(&sys, &kf).unwrap();
            assert_eq!(ss.psd_repairs, 0);
            for (a, b) in ss.steps.iter().zip(&ks.steps) {
                assert!(linalg::relative_error_vec(&a.mean, &b.mean) < 1e-10);
                assert!(linalg::relative_error(&a.cov, &b.cov) < 1e-10);
            }
        }
    }

    #[test]
    fn gaussian_scale_step_values() {
        let model = GaussianScale::new(0.0).unwrap();
        let trans = TransitionSpec::ar1(0.0, 0.9, 0.1).unwrap();
        let init = GaussianState::scalar(0.0, 0.5).unwrap();
        let run = sd_filter(
            &model,
            &trans,
            &NormalizationScheme::KalmanConsistent,
            &scalar_obs(&[2.0]),
            &init,
            &SdOptions::default(),
        )
        .unwrap();
        let s = &run.steps[0];
        assert_relative_eq!(s.score[0], 1.5);
        assert_relative_eq!(s.hessian[(0, 0)], -2.0);
        assert_relative_eq!(s.upd.a[0], 0.75);
        assert_relative_eq!(s.upd.p[(0, 0)], 0.5 - 0.5);
        assert_relative_eq!(run.next.a[0], 0.9 * 0.75);
        assert_relative_eq!(run.next.p[(0, 0)], 0.1, max_relative = 1e-15);
    }

    #[test]
    fn poisson_update_vanishes_at_matching_mean() {
        let model = PoissonDuration::new(PoissonLink::Identity);
        let trans = TransitionSpec::ar1(0.1, 0.9, 0.01).unwrap();
        let init = GaussianState::scalar(3.0, 0.2).unwrap();
        let run = sd_filter(
            &model,
            &trans,
            &NormalizationScheme::KalmanConsistent,
            &scalar_obs(&[3.0]),
            &init,
            &SdOptions::default(),
        )
        .unwrap();
        assert_eq!(run.steps[0].upd.a[0], 3.0);
    }

    #[test]
    fn poisson_loglik_single_step() {
        let model = PoissonDuration::new(PoissonLink::Identity);
        let trans = TransitionSpec::ar1(0.0, 0.5, 0.01).unwrap();
        let init = GaussianState::scalar(1.0, 0.1).unwrap();
        let run = sd_filter(
            &model,
            &trans,
            &NormalizationScheme::KalmanConsistent,
            &scalar_obs(&[2.0]),
            &init,
            &SdOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(sd_loglik(&run).unwrap(), -1.0 - 2f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn poisson_identity_link_floors_intensity() {
        let model = PoissonDuration::new(PoissonLink::Identity);
        let trans = TransitionSpec::ar1(0.0, 0.5, 0.01).unwrap();
        let init = GaussianState::scalar(-0.3, 0.1).unwrap();
        let run = sd_filter(
            &model,
            &trans,
            &NormalizationScheme::KalmanConsistent,
            &scalar_obs(&[0.0, 0.0]),
            &init,
            &SdOptions::default(),
        )
        .unwrap();
        assert!(run.steps[0].clamped);
        assert!(run.clamps >= 1);
        assert!(sd_loglik(&run).unwrap().is_finite());
        let bad = sd_filter(
            &model,
            &trans,
            &NormalizationScheme::KalmanConsistent,
            &scalar_obs(&[1.5]),
            &init,
            &SdOptions::default(),
        );
        assert!(matches!(bad, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn student_t_loglik_at_mode() {
        let model = StudentTLocation::new(0.2, 6.0).unwrap();
        let trans = TransitionSpec::ar1(0.0, 0.5, 0.01).unwrap();
        let init = GaussianState::scalar(0.7, 0.1).unwrap();
        let run = sd_filter(
            &model,
            &trans,
            &NormalizationScheme::KalmanConsistent,
            &scalar_obs(&[0.7]),
            &init,
            &SdOptions::default(),
        )
        .unwrap();
        assert_eq!(run.steps[0].loglik, model.log_density(&[0.7], &[0.7]));
        assert_eq!(run.steps[0].score[0], 0.0);
    }

    #[test]
    fn indefinite_update_is_repaired() {
        // P + P^2 hess < 0 once hess < -1/P: here hess = -4.5 and P = 0.5.
        let model = GaussianScale::new(0.0).unwrap();
        let trans = TransitionSpec::ar1(0.0, 0.9, 0.1).unwrap();
        let init = GaussianState::scalar(0.0, 0.5).unwrap();
        let run = sd_filter(
            &model,
            &trans,
            &NormalizationScheme::KalmanConsistent,
            &scalar_obs(&[3.0]),
            &init,
            &SdOptions::default(),
        )
        .unwrap();
        let s = &run.steps[0];
        assert_relative_eq!(s.hessian[(0, 0)], -4.5);
        assert!(s.repaired);
        assert_eq!(run.repairs, 1);
        assert_eq!(s.upd.p[(0, 0)], linalg::EIGEN_FLOOR);
        assert_relative_eq!(run.next.p[(0, 0)], 0.81 * linalg::EIGEN_FLOOR + 0.1);
    }

    #[test]
    fn squared_score_variant_uses_outer_product() {
        let model = GaussianScale::new(0.0).unwrap();
        let trans = TransitionSpec::ar1(0.0, 0.9, 0.1).unwrap();
        let init = GaussianState::scalar(0.0, 0.1).unwrap();
        let opts = SdOptions {
            variance_update: VarianceUpdate::SquaredScore,
            ..SdOptions::default()
        };
        let run = sd_filter(
            &model,
            &trans,
            &NormalizationScheme::KalmanConsistent,
            &scalar_obs(&[2.0]),
            &init,
            &opts,
        )
        .unwrap();
        assert_relative_eq!(run.steps[0].hessian[(0, 0)], -2.25);
        assert_relative_eq!(run.steps[0].upd.p[(0, 0)], 0.1 - 0.01 * 2.25);
    }

    #[test]
    fn scaled_score_sets_covariance_from_loading() {
        let (model, trans) = Family::GaussianScale.reference_design();
        let sample = simulate_ssm(&model, &trans, 200, 5).unwrap();
        let init = trans.stationary_state().unwrap();
        let loading = Matrix::from_element(1, 1, 0.05);
        let norm = NormalizationScheme::ScaledScore {
            loading,
            scaling: ScoreScaling::ModelDefault,
        };
        let run = sd_filter(&model, &trans, &norm, &sample.observations, &init, &SdOptions::default()).unwrap();
        for s in &run.steps {
            assert_relative_eq!(s.pred.p[(0, 0)], 0.05 / 0.98, max_relative = 1e-15);
        }
        // The predictive recursion is the usual score-driven update.
        for w in run.steps.windows(2) {
            let expected = 0.98 * w[0].pred.a[0] + 0.05 * w[0].score[0];
            assert_relative_eq!(w[1].pred.a[0], expected, max_relative = 1e-12, epsilon = 1e-15);
        }
        let fisher = NormalizationScheme::ScaledScore {
            loading: Matrix::from_element(1, 1, 0.05),
            scaling: ScoreScaling::InverseInformation { d: 1.0 },
        };
        let run = sd_filter(&model, &trans, &fisher, &sample.observations, &init, &SdOptions::default()).unwrap();
        assert_relative_eq!(run.steps[3].pred.p[(0, 0)], 0.1 / 0.98, max_relative = 1e-14);
        let smooth = sd_smoother(&model, &trans, &run).unwrap();
        assert_eq!(smooth.len(), 200);
    }

    #[test]
    fn scaled_score_rejects_bad_configuration() {
        let (model, trans) = Family::GaussianScale.reference_design();
        let init = trans.stationary_state().unwrap();
        let y = scalar_obs(&[0.1]);
        let singular = NormalizationScheme::ScaledScore {
            loading: Matrix::zeros(1, 1),
            scaling: ScoreScaling::ModelDefault,
        };
        assert!(sd_filter(&model, &trans, &singular, &y, &init, &SdOptions::default()).is_err());
        let bad_d = NormalizationScheme::ScaledScore {
            loading: Matrix::identity(1, 1),
            scaling: ScoreScaling::InverseInformation { d: 0.3 },
        };
        assert!(sd_filter(&model, &trans, &bad_d, &y, &init, &SdOptions::default()).is_err());
    }

    #[test]
    fn scaled_score_smoother_needs_identified_loading() {
        let model = TwoComponentSv::new(0.0, 8.0).unwrap();
        let trans = TransitionSpec::new(
            Vector::zeros(2),
            Matrix::from_diagonal(&Vector::from_vec(vec![0.95, 0.6])),
            Matrix::from_diagonal(&Vector::from_vec(vec![0.01, 0.05])),
        )
        .unwrap();
        let init = trans.stationary_state().unwrap();
        let sample = simulate_ssm(&model, &trans, 50, 1).unwrap();
        let norm = NormalizationScheme::ScaledScore {
            loading: Matrix::identity(2, 2) * 0.05,
            scaling: ScoreScaling::InverseInformation { d: 0.0 },
        };
        let run = sd_filter(&model, &trans, &norm, &sample.observations, &init, &SdOptions::default()).unwrap();
        assert!(matches!(
            sd_smoother(&model, &trans, &run),
            Err(Error::Identification(_))
        ));
        let kc = sd_filter(
            &model,
            &trans,
            &NormalizationScheme::KalmanConsistent,
            &sample.observations,
            &init,
            &SdOptions::default(),
        )
        .unwrap();
        assert!(sd_smoother(&model, &trans, &kc).is_ok());
    }

    #[test]
    fn non_finite_score_reports_step() {
        let model = GaussianScale::new(0.0).unwrap();
        // A huge intercept drives the predicted state to overflow.
        let trans = TransitionSpec::ar1(1e308, 1.0, 0.0).unwrap();
        let init = GaussianState::scalar(1e308, 0.0).unwrap();
        let err = sd_filter(
            &model,
            &trans,
            &NormalizationScheme::KalmanConsistent,
            &scalar_obs(&[1.0, 1.0, 1.0]),
            &init,
            &SdOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NumericalFailure { step: 0, .. }));
    }

    #[test]
    fn matrix_and_scalar_paths_agree() {
        // The two-component model with a degenerate second factor is the
        // scalar Student-t scale model run through the dense path.
        let sv = TwoComponentSv::new(0.1, 5.0).unwrap();
        let t2 = TransitionSpec::new(
            Vector::zeros(2),
            Matrix::from_diagonal(&Vector::from_vec(vec![0.98, 0.0])),
            Matrix::from_diagonal(&Vector::from_vec(vec![0.01, 0.0])),
        )
        .unwrap();
        let scalar = crate::models::StudentTScale::new(0.1, 5.0).unwrap();
        let t1 = TransitionSpec::ar1(0.0, 0.98, 0.01).unwrap();
        let sample = simulate_ssm(&scalar, &t1, 300, 8).unwrap();
        let i1 = t1.stationary_state().unwrap();
        let mut p2 = Matrix::zeros(2, 2);
        p2[(0, 0)] = i1.p[(0, 0)];
        let i2 = GaussianState::new(Vector::zeros(2), p2).unwrap();
        let norm = NormalizationScheme::KalmanConsistent;
        let r1 = sd_filter(&scalar, &t1, &norm, &sample.observations, &i1, &SdOptions::default()).unwrap();
        let r2 = sd_filter(&sv, &t2, &norm, &sample.observations, &i2, &SdOptions::default()).unwrap();
        for (a, b) in r1.steps.iter().zip(&r2.steps) {
            assert_relative_eq!(a.upd.a[0], b.upd.a[0], max_relative = 1e-12, epsilon = 1e-14);
            assert_relative_eq!(a.pred.p[(0, 0)], b.pred.p[(0, 0)], max_relative = 1e-12);
        }
    }
}
