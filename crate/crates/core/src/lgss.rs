//! Exact Kalman filtering and smoothing for time-invariant linear-Gaussian
//! state-space models
//!
//! ```text
//! y_t       = Z alpha_t + eps_t,          eps_t ~ N(0, H)
//! alpha_t+1 = c + T alpha_t + eta_t,      eta_t ~ N(0, Q)
//! ```
//!
//! Two algebraically equivalent implementations are provided. The innovation
//! form is the textbook recursion in terms of `v_t`, `F_t` and the gain `K_t`.
//! The score form rewrites every update through the score
//! `grad_t = Z' F_t^-1 v_t` and Hessian `hess_t = -Z' F_t^-1 Z` of the
//! predictive log-density; it is the template that [`crate::score_engine`]
//! applies to non-Gaussian densities.
//!
//! The backward smoothing pass in score form uses
//! `r_{t-1} = grad_t + L_t' r_t` and `N_{t-1} = -hess_t + L_t' N_t L_t` with
//! `L_t = T (I + P_t hess_t)`, which is what substituting the score and
//! Hessian into the innovation-form smoother gives.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor, PSD_TOLERANCE};
use crate::math::LN_2PI;
use crate::{Matrix, Vector};

/// Condition number of `F_t` above which the filter refuses to continue.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

/// System matrices of a time-invariant linear-Gaussian state-space model.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    /// Observation loading, `p x m`.
    pub z: Matrix,
    /// Observation noise covariance, `p x p`.
    pub h: Matrix,
    /// State transition, `m x m`.
    pub t: Matrix,
    /// State noise covariance, `m x m`.
    pub q: Matrix,
    /// State intercept, length `m`.
    pub c: Vector,
}

impl SystemMatrices {
    pub fn new(z: Matrix, h: Matrix, t: Matrix, q: Matrix, c: Vector) -> Result<Self> {
        let m = t.nrows();
        let p = z.nrows();
        if m == 0 || p == 0 {
            return Err(Error::input("state and observation dimensions must be positive"));
        }
        if t.ncols() != m || z.ncols() != m || q.shape() != (m, m) || c.len() != m {
            return Err(Error::input(format!(
                "inconsistent state dimensions: T {:?}, Z {:?}, Q {:?}, c {}",
                t.shape(),
                z.shape(),
                q.shape(),
                c.len()
            )));
        }
        if h.shape() != (p, p) {
            return Err(Error::input(format!("H must be {p}x{p}, got {:?}", h.shape())));
        }
        let finite = [&z, &h, &t, &q].iter().all(|m| linalg::all_finite(m))
            && c.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::input("system matrices must be finite"));
        }
        for (name, cov) in [("H", &h), ("Q", &q)] {
            if linalg::asymmetry(cov) > 1e-12 || !linalg::is_psd(cov, PSD_TOLERANCE) {
                return Err(Error::input(format!("{name} must be symmetric positive semidefinite")));
            }
        }
        Ok(SystemMatrices { z, h, t, q, c })
    }

    pub fn state_dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.z.nrows()
    }

    /// Stationary initial state: `a_1 = (I - T)^-1 c` and `P_1` solving
    /// `P = T P T' + Q`. Fails when `T` has spectral radius `>= 1`.
    pub fn stationary_state(&self) -> Result<GaussianState> {
        let p = linalg::discrete_lyapunov(&self.t, &self.q)?;
        let a = linalg::stationary_mean(&self.t, &self.c)?;
        GaussianState::new(a, p)
    }

    /// Draws states and observations of length `n` starting from `init`.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        init: &GaussianState,
        n: usize,
        rng: &mut R,
    ) -> (Vec<Vector>, Vec<Vector>) {
        let m = self.state_dim();
        let p = self.obs_dim();
        let q_root = linalg::psd_sqrt(&self.q);
        let h_root = linalg::psd_sqrt(&self.h);
        let p_root = linalg::psd_sqrt(&init.p);
        let mut normal = |k: usize| Vector::from_fn(k, |_, _| StandardNormal.sample(rng));
        let mut alpha = &init.a + &p_root * normal(m);
        let mut states = Vec::with_capacity(n);
        let mut obs = Vec::with_capacity(n);
        for _ in 0..n {
            obs.push(&self.z * &alpha + &h_root * normal(p));
            let next = &self.c + &self.t * &alpha + &q_root * normal(m);
            states.push(core::mem::replace(&mut alpha, next));
        }
        (states, obs)
    }
}

/// Conditional mean and covariance of the state at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub a: Vector,
    pub p: Matrix,
}

impl GaussianState {
    /// Validates that `p` is square, matches `a`, is symmetric and PSD.
    pub fn new(a: Vector, p: Matrix) -> Result<Self> {
        if p.shape() != (a.len(), a.len()) {
            return Err(Error::input(format!(
                "covariance shape {:?} does not match mean length {}",
                p.shape(),
                a.len()
            )));
        }
        if !a.iter().all(|v| v.is_finite()) || !linalg::all_finite(&p) {
            return Err(Error::input("state mean and covariance must be finite"));
        }
        let scale = p.amax().max(1.0);
        if linalg::asymmetry(&p) > 1e-12 * scale {
            return Err(Error::input("state covariance must be symmetric"));
        }
        if !linalg::is_psd(&p, PSD_TOLERANCE) {
            return Err(Error::input("state covariance must be positive semidefinite"));
        }
        Ok(GaussianState {
            a,
            p: linalg::symmetrize(&p),
        })
    }

    pub fn scalar(a: f64, p: f64) -> Result<Self> {
        Self::new(Vector::from_element(1, a), Matrix::from_element(1, 1, p))
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }
}

/// Per-step output of the Kalman filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    /// Innovation `v_t = y_t - Z a_t`.
    pub v: Vector,
    /// Innovation covariance `F_t`.
    pub f: Matrix,
    /// Predictive state `(a_t, P_t)`.
    pub pred: GaussianState,
    /// Update state `(a_{t|t}, P_{t|t})`.
    pub upd: GaussianState,
    /// Gain `K_t = T P_t Z' F_t^-1`.
    pub gain: Matrix,
    /// Score `Z' F_t^-1 v_t`.
    pub score: Vector,
    /// Hessian `-Z' F_t^-1 Z`.
    pub hessian: Matrix,
    /// Log predictive density of `y_t`.
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub steps: Vec<FilterStep>,
    /// Prediction for the step after the last observation.
    pub next: GaussianState,
}

impl FilterRun {
    pub fn loglik(&self) -> f64 {
        self.steps.iter().map(|s| s.loglik).sum()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Per-step output of the backward pass. `r` and `n` hold `r_{t-1}` and
/// `N_{t-1}`, the quantities that enter the smoothed moments of step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherStep {
    pub r: Vector,
    pub n: Matrix,
    pub l: Matrix,
    pub mean: Vector,
    pub cov: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherRun {
    pub steps: Vec<SmootherStep>,
    /// Number of smoothed covariances that had to be repaired to stay PSD.
    /// Always zero for the exact linear-Gaussian smoother.
    pub psd_repairs: usize,
}

impl SmootherRun {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn check_inputs(sys: &SystemMatrices, y: &[Vector], init: &GaussianState) -> Result<()> {
    if init.dim() != sys.state_dim() {
        return Err(Error::input(format!(
            "initial state has dimension {}, system has {}",
            init.dim(),
            sys.state_dim()
        )));
    }
    for (t, obs) in y.iter().enumerate() {
        if obs.len() != sys.obs_dim() {
            return Err(Error::input(format!(
                "observation {t} has length {}, expected {}",
                obs.len(),
                sys.obs_dim()
            )));
        }
        if !obs.iter().all(|v| v.is_finite()) {
            return Err(Error::input(format!("observation {t} is missing or not finite")));
        }
    }
    Ok(())
}

struct Innovation {
    v: Vector,
    f: Matrix,
    factor: SpdFactor,
    loglik: f64,
}

fn innovation(sys: &SystemMatrices, y: &Vector, pred: &GaussianState, step: usize) -> Result<Innovation> {
    let v = y - &sys.z * &pred.a;
    let f = linalg::symmetrize(&(&sys.z * &pred.p * sys.z.transpose() + &sys.h));
    let factor = SpdFactor::new(&f, MAX_INNOVATION_CONDITION).ok_or_else(|| {
        let ev = linalg::symmetric_eigenvalues(&f);
        let condition = if ev.min() > 0.0 {
            ev.max() / ev.min()
        } else {
            f64::INFINITY
        };
        Error::SingularInnovation { step, condition }
    })?;
    let finv_v = factor.solve_vec(&v);
    let p = sys.obs_dim() as f64;
    let loglik = -0.5 * p * LN_2PI - 0.5 * (factor.ln_determinant() + v.dot(&finv_v));
    Ok(Innovation { v, f, factor, loglik })
}

/// Innovation-form Kalman filter.
pub fn kalman_filter(sys: &SystemMatrices, y: &[Vector], init: &GaussianState) -> Result<FilterRun> {
    check_inputs(sys, y, init)?;
    let mut pred = init.clone();
    let mut steps = Vec::with_capacity(y.len());
    for (t, obs) in y.iter().enumerate() {
        let inn = innovation(sys, obs, &pred, t)?;
        let pzt = &pred.p * sys.z.transpose();
        // P Z' F^-1, computed as (F^-1 Z P)'
        let pzt_finv = inn.factor.solve(&pzt.transpose()).transpose();
        let gain = &sys.t * &pzt_finv;
        let upd_a = &pred.a + &pzt_finv * &inn.v;
        let upd_p = linalg::symmetrize(&(&pred.p - &pzt_finv * pzt.transpose()));
        let next_a = &sys.c + &sys.t * &pred.a + &gain * &inn.v;
        let l = &sys.t - &gain * &sys.z;
        let next_p = linalg::symmetrize(&(&sys.t * &pred.p * l.transpose() + &sys.q));

        let score = sys.z.transpose() * inn.factor.solve_vec(&inn.v);
        let hessian = -(sys.z.transpose() * inn.factor.solve(&sys.z));
        let next = GaussianState { a: next_a, p: next_p };
        steps.push(FilterStep {
            v: inn.v,
            f: inn.f,
            pred: core::mem::replace(&mut pred, next),
            upd: GaussianState { a: upd_a, p: upd_p },
            gain,
            score,
            hessian: linalg::symmetrize(&hessian),
            loglik: inn.loglik,
        });
    }
    Ok(FilterRun { steps, next: pred })
}

/// Score-form Kalman filter: identical output to [`kalman_filter`] up to
/// round-off, but every update goes through the score and Hessian.
pub fn kalman_filter_score_form(
    sys: &SystemMatrices,
    y: &[Vector],
    init: &GaussianState,
) -> Result<FilterRun> {
    check_inputs(sys, y, init)?;
    let mut pred = init.clone();
    let mut steps = Vec::with_capacity(y.len());
    for (t, obs) in y.iter().enumerate() {
        let inn = innovation(sys, obs, &pred, t)?;
        let score = sys.z.transpose() * inn.factor.solve_vec(&inn.v);
        let hessian = linalg::symmetrize(&-(sys.z.transpose() * inn.factor.solve(&sys.z)));
        let (upd, next) = score_update(&sys.c, &sys.t, &sys.q, &pred, &score, &hessian);
        let gain = &sys.t * inn.factor.solve(&(&sys.z * &pred.p)).transpose();
        steps.push(FilterStep {
            v: inn.v,
            f: inn.f,
            pred: core::mem::replace(&mut pred, next),
            upd,
            gain,
            score,
            hessian,
            loglik: inn.loglik,
        });
    }
    Ok(FilterRun { steps, next: pred })
}

/// One step of the score-driven update:
///
/// ```text
/// a_{t|t} = a_t + P_t grad_t          P_{t|t} = P_t + P_t hess_t P_t
/// a_{t+1} = c + T a_t + T P_t grad_t  P_{t+1} = T P_t (T + T P_t hess_t)' + Q
/// ```
pub(crate) fn score_update(
    c: &Vector,
    t: &Matrix,
    q: &Matrix,
    pred: &GaussianState,
    score: &Vector,
    hessian: &Matrix,
) -> (GaussianState, GaussianState) {
    let p_grad = &pred.p * score;
    let upd_a = &pred.a + &p_grad;
    let upd_p = linalg::symmetrize(&(&pred.p + &pred.p * hessian * &pred.p));
    let next_a = c + t * &pred.a + t * &p_grad;
    let tp = t * &pred.p;
    let next_p = linalg::symmetrize(&(&tp * (t + &tp * hessian).transpose() + q));
    (
        GaussianState { a: upd_a, p: upd_p },
        GaussianState { a: next_a, p: next_p },
    )
}

fn check_smoother_inputs(sys: &SystemMatrices, filt: &FilterRun) -> Result<()> {
    let m = sys.state_dim();
    let p = sys.obs_dim();
    for (t, s) in filt.steps.iter().enumerate() {
        if s.pred.dim() != m || s.v.len() != p || s.gain.shape() != (m, p) || s.hessian.shape() != (m, m) {
            return Err(Error::input(format!(
                "filter output at step {t} does not match the system dimensions"
            )));
        }
    }
    Ok(())
}

/// Innovation-form fixed-interval smoother with `L_t = T - K_t Z`.
pub fn kalman_smoother(sys: &SystemMatrices, filt: &FilterRun) -> Result<SmootherRun> {
    check_smoother_inputs(sys, filt)?;
    let m = sys.state_dim();
    let mut r = Vector::zeros(m);
    let mut n = Matrix::zeros(m, m);
    let mut out = Vec::with_capacity(filt.len());
    for (t, s) in filt.steps.iter().enumerate().rev() {
        let factor = SpdFactor::new(&s.f, MAX_INNOVATION_CONDITION).ok_or(Error::SingularInnovation {
            step: t,
            condition: f64::INFINITY,
        })?;
        let l = &sys.t - &s.gain * &sys.z;
        r = sys.z.transpose() * factor.solve_vec(&s.v) + l.transpose() * &r;
        n = linalg::symmetrize(&(sys.z.transpose() * factor.solve(&sys.z) + l.transpose() * &n * &l));
        let mean = &s.pred.a + &s.pred.p * &r;
        let cov = linalg::symmetrize(&(&s.pred.p - &s.pred.p * &n * &s.pred.p));
        out.push(SmootherStep {
            r: r.clone(),
            n: n.clone(),
            l,
            mean,
            cov,
        });
    }
    out.reverse();
    Ok(SmootherRun {
        steps: out,
        psd_repairs: 0,
    })
}

/// Score-form smoother. Output equals [`kalman_smoother`] up to round-off.
pub fn kalman_smoother_score_form(sys: &SystemMatrices, filt: &FilterRun) -> Result<SmootherRun> {
    check_smoother_inputs(sys, filt)?;
    let inputs = filt.steps.iter().map(|s| BackwardInput {
        pred: &s.pred,
        score: &s.score,
        hessian: &s.hessian,
    });
    Ok(score_backward(&sys.t, inputs, false))
}

pub(crate) struct BackwardInput<'a> {
    pub pred: &'a GaussianState,
    pub score: &'a Vector,
    pub hessian: &'a Matrix,
}

/// Backward pass driven by score and Hessian. With `repair` set, smoothed
/// covariances that lose positive semi-definiteness are clipped.
pub(crate) fn score_backward<'a, I>(t_mat: &Matrix, inputs: I, repair: bool) -> SmootherRun
where
    I: DoubleEndedIterator<Item = BackwardInput<'a>> + ExactSizeIterator,
{
    let m = t_mat.nrows();
    let eye = Matrix::identity(m, m);
    let mut r = Vector::zeros(m);
    let mut n = Matrix::zeros(m, m);
    let mut repairs = 0;
    let mut out = Vec::with_capacity(inputs.len());
    for inp in inputs.rev() {
        let l = t_mat * (&eye + &inp.pred.p * inp.hessian);
        r = inp.score + l.transpose() * &r;
        n = linalg::symmetrize(&(-inp.hessian + l.transpose() * &n * &l));
        let mean = &inp.pred.a + &inp.pred.p * &r;
        let mut cov = linalg::symmetrize(&(&inp.pred.p - &inp.pred.p * &n * &inp.pred.p));
        if repair {
            let (fixed, clipped) = linalg::clip_psd(&cov, linalg::EIGEN_FLOOR);
            if clipped {
                repairs += 1;
                cov = fixed;
            }
        }
        out.push(SmootherStep {
            r: r.clone(),
            n: n.clone(),
            l,
            mean,
            cov,
        });
    }
    out.reverse();
    SmootherRun {
        steps: out,
        psd_repairs: repairs,
    }
}

/// Random stable system used by property checks: `T` has spectral radius at
/// most 0.95, `H` and `Q` are well-conditioned covariances.
pub fn random_stable_system<R: Rng + ?Sized>(rng: &mut R, m: usize, p: usize) -> SystemMatrices {
    let mut unif = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let mut t = Matrix::from_fn(m, m, |_, _| unif(-1.0, 1.0));
    let rho = linalg::spectral_radius(&t);
    let target = unif(0.1, 0.95);
    if rho > 0.0 {
        t *= target / rho;
    }
    let z = Matrix::from_fn(p, m, |_, _| unif(-1.5, 1.5));
    let bq = Matrix::from_fn(m, m, |_, _| unif(-1.0, 1.0));
    let q = linalg::symmetrize(&(&bq * bq.transpose() + Matrix::identity(m, m) * unif(0.05, 0.5)));
    let bh = Matrix::from_fn(p, p, |_, _| unif(-1.0, 1.0));
    let h = linalg::symmetrize(&(&bh * bh.transpose() + Matrix::identity(p, p) * unif(0.1, 1.0)));
    let c = Vector::from_fn(m, |_, _| unif(-0.5, 0.5));
    SystemMatrices { z, h, t, q, c }
}
