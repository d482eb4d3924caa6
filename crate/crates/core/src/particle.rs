//! Bootstrap particle filter and backward-simulation particle smoother, used
//! as the simulation-based reference for the score-driven filters.
//!
//! The filter proposes from the state transition, weights by the
//! data-generating observation density and resamples systematically when the
//! effective sample size drops below a fraction of `N`. The smoother draws
//! `M` backward trajectories; each backward index is found by rejection
//! sampling against the Gaussian transition density bound, falling back to
//! the exact categorical draw after a fixed number of rejections.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimation::{optim, FitConfig, ModelSpec};
use crate::lgss::GaussianState;
use crate::linalg::{self, SpdFactor};
use crate::math::{exp, ln, sqrt};
use crate::rng::{seeded, SimRng};
use crate::score_engine::{ObservationModel, TransitionSpec};
use crate::{Matrix, Vector};

/// Smallest particle count accepted.
pub const MIN_PARTICLES: usize = 100;

/// Rejection attempts per backward draw before the exact draw is used.
const MAX_REJECTIONS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfOptions {
    pub particles: usize,
    pub seed: u64,
    /// Resample when ESS < `resample_fraction * N`.
    pub resample_fraction: f64,
    /// Keep the weighted clouds from this step on, for the smoother.
    pub store_from: Option<usize>,
}

impl PfOptions {
    pub fn new(particles: usize, seed: u64) -> Self {
        PfOptions {
            particles,
            seed,
            resample_fraction: 0.5,
            store_from: None,
        }
    }
}

/// Weighted particles at one step; particle `i` occupies
/// `particles[i * dim..(i + 1) * dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub dim: usize,
    pub particles: Vec<f64>,
    pub weights: Vec<f64>,
    pub ess: f64,
}

impl ParticleCloud {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-step summaries of the filter; variances are the diagonal of the
/// weighted covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PfStep {
    pub pred_mean: Vector,
    pub pred_var: Vector,
    pub mean: Vector,
    pub var: Vector,
    pub ess: f64,
    pub resampled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfRun {
    pub steps: Vec<PfStep>,
    pub loglik: f64,
    /// Weighted clouds for steps `cloud_start..n`.
    pub clouds: Vec<ParticleCloud>,
    pub cloud_start: usize,
}

/// Smoothed moments for steps `start..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsRun {
    pub start: usize,
    pub mean: Vec<Vector>,
    pub var: Vec<Vector>,
}

/// Flattened transition for fast propagation.
struct Propagator {
    m: usize,
    c: Vec<f64>,
    t: Vec<f64>,
    root: Vec<f64>,
}

impl Propagator {
    fn new(trans: &TransitionSpec) -> Self {
        let m = trans.dim();
        let root = linalg::psd_sqrt(&trans.q);
        let flat = |a: &Matrix| (0..m * m).map(|k| a[(k / m, k % m)]).collect();
        Propagator {
            m,
            c: trans.c.iter().copied().collect(),
            t: flat(&trans.t),
            root: flat(&root),
        }
    }

    /// `out = c + T x`.
    fn mean(&self, x: &[f64], out: &mut [f64]) {
        let m = self.m;
        for r in 0..m {
            let mut s = self.c[r];
            for k in 0..m {
                s += self.t[r * m + k] * x[k];
            }
            out[r] = s;
        }
    }

    fn step(&self, x: &[f64], out: &mut [f64], eps: &mut [f64], rng: &mut SimRng) {
        let m = self.m;
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        self.mean(x, out);
        for r in 0..m {
            for k in 0..m {
                out[r] += self.root[r * m + k] * eps[k];
            }
        }
    }
}

fn check_inputs<M: ObservationModel + ?Sized>(
    model: &M,
    trans: &TransitionSpec,
    y: &[Vector],
    init: &GaussianState,
    opts: &PfOptions,
) -> Result<()> {
    if opts.particles < MIN_PARTICLES {
        return Err(Error::input(format!(
            "the particle filter needs at least {MIN_PARTICLES} particles, got {}",
            opts.particles
        )));
    }
    if y.is_empty() {
        return Err(Error::input("empty observation sequence"));
    }
    if model.state_dim() != trans.dim() || init.dim() != trans.dim() {
        return Err(Error::input("model, transition and initial state dimensions differ"));
    }
    if let Some((t, _)) = y
        .iter()
        .enumerate()
        .find(|(_, v)| v.len() != model.obs_dim() || !v.iter().all(|x| x.is_finite()))
    {
        return Err(Error::input(format!("observation {t} is missing or malformed")));
    }
    if !(opts.resample_fraction >= 0.0 && opts.resample_fraction <= 1.0) {
        return Err(Error::input("resample fraction must lie in [0, 1]"));
    }
    Ok(())
}

fn weighted_moments(m: usize, x: &[f64], w: &[f64]) -> (Vector, Vector) {
    let mut mean = Vector::zeros(m);
    for (i, &wi) in w.iter().enumerate() {
        for k in 0..m {
            mean[k] += wi * x[i * m + k];
        }
    }
    let mut var = Vector::zeros(m);
    for (i, &wi) in w.iter().enumerate() {
        for k in 0..m {
            let d = x[i * m + k] - mean[k];
            var[k] += wi * d * d;
        }
    }
    (mean, var)
}

fn systematic_resample(
    m: usize,
    x: &[f64],
    w: &[f64],
    out: &mut Vec<f64>,
    rng: &mut SimRng,
) {
    let n = w.len();
    let step = 1.0 / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut cum = w[0];
    let mut i = 0;
    out.clear();
    for _ in 0..n {
        while u > cum && i + 1 < n {
            i += 1;
            cum += w[i];
        }
        out.extend_from_slice(&x[i * m..(i + 1) * m]);
        u += step;
    }
}

struct Visit<'a> {
    t: usize,
    x: &'a [f64],
    w: &'a [f64],
    prev_w: &'a [f64],
    ess: f64,
    resampled: bool,
}

struct Forward<'a, M: ?Sized> {
    model: &'a M,
    prop: Propagator,
    y: &'a [Vector],
    opts: PfOptions,
}

impl<M: ObservationModel + ?Sized> Forward<'_, M> {
    /// Runs the filter; `visit` sees every weighted cloud together with the
    /// predictive weights and whether the particles were resampled before
    /// the step.
    fn run(&self, init: &GaussianState, mut visit: impl FnMut(Visit<'_>)) -> Result<f64> {
        let n_part = self.opts.particles;
        let m = self.prop.m;
        let mut rng = seeded(self.opts.seed);
        let init_root = linalg::psd_sqrt(&init.p);
        let mut x = vec![0.0; n_part * m];
        let mut eps = vec![0.0; m];
        for i in 0..n_part {
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            for r in 0..m {
                let mut s = init.a[r];
                for k in 0..m {
                    s += init_root[(r, k)] * eps[k];
                }
                x[i * m + r] = s;
            }
        }
        let mut w = vec![1.0 / n_part as f64; n_part];
        let mut prev_w = w.clone();
        let mut lg = vec![0.0; n_part];
        let mut scratch = Vec::with_capacity(n_part * m);
        let mut loglik = 0.0;
        let mut resampled = false;
        for (t, yt) in self.y.iter().enumerate() {
            let ys = yt.as_slice();
            let mut max_lg = f64::NEG_INFINITY;
            for i in 0..n_part {
                let v = self.model.dgp_log_density(ys, &x[i * m..(i + 1) * m]);
                let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
                lg[i] = v;
                if v > max_lg {
                    max_lg = v;
                }
            }
            if max_lg == f64::NEG_INFINITY || max_lg.is_nan() {
                return Err(Error::ParticleDegeneracy { step: t });
            }
            prev_w.copy_from_slice(&w);
            let mut total = 0.0;
            for i in 0..n_part {
                w[i] *= exp(lg[i] - max_lg);
                total += w[i];
            }
            if !(total > 0.0) || !total.is_finite() {
                return Err(Error::ParticleDegeneracy { step: t });
            }
            loglik += max_lg + ln(total);
            let mut sq = 0.0;
            for wi in w.iter_mut() {
                *wi /= total;
                sq += *wi * *wi;
            }
            let ess = 1.0 / sq;
            visit(Visit {
                t,
                x: &x,
                w: &w,
                prev_w: &prev_w,
                ess,
                resampled,
            });
            if t + 1 == self.y.len() {
                break;
            }
            resampled = ess < self.opts.resample_fraction * n_part as f64;
            if resampled {
                systematic_resample(m, &x, &w, &mut scratch, &mut rng);
                core::mem::swap(&mut x, &mut scratch);
                w.fill(1.0 / n_part as f64);
            }
            scratch.clear();
            scratch.resize(n_part * m, 0.0);
            for i in 0..n_part {
                self.prop
                    .step(&x[i * m..(i + 1) * m], &mut scratch[i * m..(i + 1) * m], &mut eps, &mut rng);
            }
            core::mem::swap(&mut x, &mut scratch);
        }
        Ok(loglik)
    }
}

/// Bootstrap particle filter started from `init`.
pub fn particle_filter<M: ObservationModel + ?Sized>(
    model: &M,
    trans: &TransitionSpec,
    y: &[Vector],
    init: &GaussianState,
    opts: &PfOptions,
) -> Result<PfRun> {
    check_inputs(model, trans, y, init, opts)?;
    let fwd = Forward {
        model,
        prop: Propagator::new(trans),
        y,
        opts: *opts,
    };
    let m = trans.dim();
    let cloud_start = opts.store_from.unwrap_or(y.len()).min(y.len());
    let mut steps = Vec::with_capacity(y.len());
    let mut clouds = Vec::with_capacity(y.len() - cloud_start);
    let loglik = fwd.run(init, |v| {
        let (pred_mean, pred_var) = weighted_moments(m, v.x, v.prev_w);
        let (mean, var) = weighted_moments(m, v.x, v.w);
        steps.push(PfStep {
            pred_mean,
            pred_var,
            mean,
            var,
            ess: v.ess,
            resampled: v.resampled,
        });
        if v.t >= cloud_start {
            clouds.push(ParticleCloud {
                dim: m,
                particles: v.x.to_vec(),
                weights: v.w.to_vec(),
                ess: v.ess,
            });
        }
    })?;
    Ok(PfRun {
        steps,
        loglik,
        clouds,
        cloud_start,
    })
}

/// Log-likelihood estimate of the bootstrap filter without per-step
/// storage. Equals `particle_filter(..).loglik` for the same seed.
pub fn particle_loglik<M: ObservationModel + ?Sized>(
    model: &M,
    trans: &TransitionSpec,
    y: &[Vector],
    init: &GaussianState,
    opts: &PfOptions,
) -> Result<f64> {
    check_inputs(model, trans, y, init, opts)?;
    let fwd = Forward {
        model,
        prop: Propagator::new(trans),
        y,
        opts: *opts,
    };
    fwd.run(init, |_| {})
}

/// Draws from a categorical distribution by inversion of its cumulative
/// weights.
fn draw_index(cum: &[f64], rng: &mut SimRng) -> usize {
    let total = cum[cum.len() - 1];
    let u = rng.random::<f64>() * total;
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

/// Backward-simulation smoother over the stored clouds of `run`.
pub fn particle_smoother(
    run: &PfRun,
    trans: &TransitionSpec,
    trajectories: usize,
    seed: u64,
) -> Result<PsRun> {
    if trajectories == 0 {
        return Err(Error::input("at least one backward trajectory is required"));
    }
    if run.clouds.is_empty() {
        return Err(Error::input(
            "the filter run kept no particle clouds; set store_from to keep them",
        ));
    }
    let m = trans.dim();
    if run.clouds[0].dim != m {
        return Err(Error::input("cloud dimension differs from the transition"));
    }
    let factor = SpdFactor::new(&trans.q, f64::INFINITY).ok_or_else(|| {
        Error::input("backward simulation needs a positive-definite state noise covariance")
    })?;
    let l_inv = factor
        .l()
        .solve_lower_triangular(&Matrix::identity(m, m))
        .ok_or_else(|| Error::input("state noise covariance factor is singular"))?;
    let l_inv: Vec<f64> = (0..m * m).map(|k| l_inv[(k / m, k % m)]).collect();
    let prop = Propagator::new(trans);
    // -1/2 |L^-1 (x' - c - T x)|^2
    let log_kernel = |x: &[f64], next: &[f64], buf: &mut [f64]| -> f64 {
        prop.mean(x, buf);
        for k in 0..m {
            buf[k] = next[k] - buf[k];
        }
        let mut q = 0.0;
        for r in 0..m {
            let mut s = 0.0;
            for k in 0..=r {
                s += l_inv[r * m + k] * buf[k];
            }
            q += s * s;
        }
        -0.5 * q
    };

    let k = run.clouds.len();
    let mut rng = seeded(seed);
    let mut sum = vec![vec![0.0; m]; k];
    let mut sum_sq = vec![vec![0.0; m]; k];
    let cumulative = |c: &ParticleCloud| -> Vec<f64> {
        let mut acc = 0.0;
        c.weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect()
    };
    let mut current = vec![0usize; trajectories];
    let mut cum = cumulative(&run.clouds[k - 1]);
    for idx in current.iter_mut() {
        *idx = draw_index(&cum, &mut rng);
    }
    let mut buf = vec![0.0; m];
    let mut exact_lw: Vec<f64> = Vec::new();
    let mut exact_cum: Vec<f64> = Vec::new();
    let mut fallbacks = 0usize;
    for s in (0..k).rev() {
        let cloud = &run.clouds[s];
        if s + 1 < k {
            let next_cloud = &run.clouds[s + 1];
            cum = cumulative(cloud);
            for idx in current.iter_mut() {
                let next = next_cloud.particle(*idx);
                let mut chosen = None;
                for _ in 0..MAX_REJECTIONS {
                    let i = draw_index(&cum, &mut rng);
                    let lk = log_kernel(cloud.particle(i), next, &mut buf);
                    if ln(rng.random::<f64>()) <= lk {
                        chosen = Some(i);
                        break;
                    }
                }
                *idx = match chosen {
                    Some(i) => i,
                    None => {
                        fallbacks += 1;
                        exact_lw.clear();
                        let mut max = f64::NEG_INFINITY;
                        for i in 0..cloud.len() {
                            let wi = cloud.weights[i];
                            let v = if wi > 0.0 {
                                ln(wi) + log_kernel(cloud.particle(i), next, &mut buf)
                            } else {
                                f64::NEG_INFINITY
                            };
                            max = max.max(v);
                            exact_lw.push(v);
                        }
                        if max == f64::NEG_INFINITY {
                            return Err(Error::ParticleDegeneracy {
                                step: run.cloud_start + s,
                            });
                        }
                        exact_cum.clear();
                        let mut acc = 0.0;
                        for v in &exact_lw {
                            acc += exp(v - max);
                            exact_cum.push(acc);
                        }
                        draw_index(&exact_cum, &mut rng)
                    }
                };
            }
        }
        for &idx in &current {
            let x = cloud.particle(idx);
            for j in 0..m {
                sum[s][j] += x[j];
                sum_sq[s][j] += x[j] * x[j];
            }
        }
    }
    if fallbacks > 0 {
        log::debug!("backward simulation used {fallbacks} exact draws");
    }
    let mf = trajectories as f64;
    let mean: Vec<Vector> = sum.iter().map(|s| Vector::from_iterator(m, s.iter().map(|v| v / mf))).collect();
    let var = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, mu)| Vector::from_iterator(m, sq.iter().zip(mu.iter()).map(|(q, u)| (q / mf - u * u).max(0.0))))
        .collect();
    Ok(PsRun {
        start: run.cloud_start,
        mean,
        var,
    })
}

/// Result of maximizing the particle-filter likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct PfFit {
    pub values: Vec<f64>,
    pub loglik: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub message: String,
}

/// Maximizes the particle-filter log-likelihood estimate with Nelder-Mead in
/// the transformed coordinates of `spec`, reusing the same random numbers at
/// every evaluation. Parameters fixed by `config` (or the family default)
/// are held at their values.
pub fn fit_particle_likelihood(
    spec: &ModelSpec,
    y: &[Vector],
    particles: usize,
    config: &FitConfig,
    max_evaluations: usize,
) -> Result<PfFit> {
    let layout = spec.layout();
    let k = layout.len();
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
            .ok_or_else(|| Error::input(format!("unknown parameter '{name}'")))?;
        template[i] = *value;
        is_fixed[i] = true;
    }
    let free: Vec<usize> = (0..k).filter(|&i| !is_fixed[i]).collect();
    let opts = PfOptions::new(particles, config.seed);
    let natural = |x: &[f64]| {
        let mut theta = template.clone();
        for (&i, &v) in free.iter().zip(x) {
            theta[i] = layout[i].1.to_natural(v);
        }
        theta
    };
    let objective = |x: &[f64]| -> f64 {
        let theta = natural(x);
        let ll = spec
            .build(&theta)
            .and_then(|s| particle_loglik(&s.model, &s.trans, y, &s.init, &opts));
        match ll {
            Ok(v) if v.is_finite() => -v / y.len() as f64,
            _ => f64::INFINITY,
        }
    };
    let x0: Vec<f64> = free.iter().map(|&i| layout[i].1.to_free(template[i])).collect();
    if !objective(&x0).is_finite() {
        return Err(Error::EstimationFailure {
            reason: String::from("particle likelihood not finite at the start"),
            starts: Vec::new(),
        });
    }
    let res = optim::nelder_mead(objective, &x0, 0.2, max_evaluations, config.optimizer.relative_tolerance);
    Ok(PfFit {
        values: natural(&res.x),
        loglik: -res.value * y.len() as f64,
        evaluations: res.evaluations,
        converged: res.converged,
        message: res.message,
    })
}

/// Standard error of a weighted mean from the effective sample size.
pub fn mc_standard_error(var: f64, ess: f64) -> f64 {
    sqrt(var / ess)
}
