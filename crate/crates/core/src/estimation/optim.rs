//! Unconstrained minimizers: BFGS with finite-difference gradients and an
//! Armijo backtracking line search, and a Nelder-Mead simplex.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg;
use crate::math::sqrt;
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub max_iterations: usize,
    /// Stop when the gradient norm falls below this value.
    pub gradient_tolerance: f64,
    /// Stop when the relative objective change falls below this value.
    pub relative_tolerance: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            relative_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub message: String,
}

struct Counted<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Central-difference gradient. Coordinates where a side evaluates to a
/// non-finite value fall back to a one-sided difference.
pub fn numerical_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], fx: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i]);
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let dn = f(&work);
            work[i] = x[i];
            match (up.is_finite(), dn.is_finite()) {
                (true, true) => (up - dn) / (2.0 * h),
                (true, false) => (up - fx) / h,
                (false, true) => (fx - dn) / h,
                (false, false) => f64::NAN,
            }
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    sqrt(v.iter().map(|x| x * x).sum())
}

/// Quasi-Newton minimization with BFGS updates of the inverse Hessian.
pub fn bfgs<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], opts: &OptimOptions) -> Minimum {
    let mut obj = Counted { f, evaluations: 0 };
    let k = x0.len();
    let mut x = x0.to_vec();
    let mut fx = obj.eval(&x);
    let fail = |x: Vec<f64>, value, it, ev, g, msg: &str| Minimum {
        x,
        value,
        iterations: it,
        evaluations: ev,
        gradient_norm: g,
        converged: false,
        message: String::from(msg),
    };
    if !fx.is_finite() {
        return fail(x, fx, 0, obj.evaluations, f64::NAN, "objective not finite at start");
    }
    let mut grad = numerical_gradient(&mut |z: &[f64]| obj.eval(z), &x, fx);
    let mut inv_h = Matrix::identity(k, k);
    let mut first = true;
    for it in 0..opts.max_iterations {
        let gnorm = norm(&grad);
        if !gnorm.is_finite() {
            return fail(x, fx, it, obj.evaluations, gnorm, "gradient not finite");
        }
        if gnorm < opts.gradient_tolerance {
            return Minimum {
                x,
                value: fx,
                iterations: it,
                evaluations: obj.evaluations,
                gradient_norm: gnorm,
                converged: true,
                message: String::from("gradient norm below tolerance"),
            };
        }
        let g = Vector::from_column_slice(&grad);
        let mut dir = -(&inv_h * &g);
        let mut slope = dir.dot(&g);
        if !(slope < 0.0) {
            inv_h = Matrix::identity(k, k);
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        if first {
            // Keep the first trial step modest in the free coordinates.
            let len = dir.norm();
            if len > 1.0 {
                dir /= len;
                slope /= len;
            }
            first = false;
        }
        let mut step = 1.0;
        let mut trial = x.clone();
        let mut f_trial = f64::INFINITY;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..k {
                trial[i] = x[i] + step * dir[i];
            }
            f_trial = obj.eval(&trial);
            if f_trial.is_finite() && f_trial <= fx + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return fail(x, fx, it, obj.evaluations, gnorm, "line search failed");
        }
        let g_new = numerical_gradient(&mut |z: &[f64]| obj.eval(z), &trial, f_trial);
        let s = Vector::from_iterator(k, trial.iter().zip(&x).map(|(a, b)| a - b));
        let yv = Vector::from_iterator(k, g_new.iter().zip(&grad).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let eye = Matrix::identity(k, k);
            let left = &eye - &s * yv.transpose() * rho;
            inv_h = &left * &inv_h * left.transpose() + &s * s.transpose() * rho;
            inv_h = linalg::symmetrize(&inv_h);
        }
        let change = (fx - f_trial).abs();
        x = trial;
        let prev = fx;
        fx = f_trial;
        grad = g_new;
        if change <= opts.relative_tolerance * prev.abs().max(f64::MIN_POSITIVE) {
            return Minimum {
                x,
                value: fx,
                iterations: it + 1,
                evaluations: obj.evaluations,
                gradient_norm: norm(&grad),
                converged: true,
                message: String::from("relative objective change below tolerance"),
            };
        }
    }
    let gnorm = norm(&grad);
    fail(x, fx, opts.max_iterations, obj.evaluations, gnorm, "iteration limit reached")
}

/// Nelder-Mead simplex with the standard reflection, expansion, contraction
/// and shrink coefficients. `scale` sets the initial simplex edge length.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    scale: f64,
    max_evaluations: usize,
    tolerance: f64,
) -> Minimum {
    let mut obj = Counted { f, evaluations: 0 };
    let k = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    simplex.push(x0.to_vec());
    for i in 0..k {
        let mut v = x0.to_vec();
        v[i] += if v[i] != 0.0 { scale * v[i].abs().max(1.0) } else { scale };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| obj.eval(v)).collect();
    let mut iterations = 0;
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    loop {
        let mut order: Vec<usize> = (0..=k).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let (best, worst) = (values[0], values[k]);
        let spread = (worst - best).abs();
        let size = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let converged = best.is_finite() && spread <= tolerance * (best.abs() + tolerance) && size < 1e-8_f64.max(tolerance);
        if converged || obj.evaluations >= max_evaluations {
            return Minimum {
                x: simplex[0].clone(),
                value: best,
                iterations,
                evaluations: obj.evaluations,
                gradient_norm: f64::NAN,
                converged: converged || (best.is_finite() && spread <= tolerance * (best.abs() + tolerance)),
                message: if converged {
                    String::from("simplex collapsed")
                } else {
                    format!("evaluation limit {max_evaluations} reached")
                },
            };
        }
        iterations += 1;
        let centroid: Vec<f64> = (0..k)
            .map(|j| simplex[..k].iter().map(|v| v[j]).sum::<f64>() / k as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..k).map(|j| centroid[j] + t * (simplex[k][j] - centroid[j])).collect()
        };
        let xr = along(-alpha);
        let fr = obj.eval(&xr);
        if fr < values[0] {
            let xe = along(-alpha * gamma);
            let fe = obj.eval(&xe);
            if fe < fr {
                simplex[k] = xe;
                values[k] = fe;
            } else {
                simplex[k] = xr;
                values[k] = fr;
            }
            continue;
        }
        if fr < values[k - 1] {
            simplex[k] = xr;
            values[k] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[k] {
            let xc = along(-alpha * rho);
            let fc = obj.eval(&xc);
            (xc, fc)
        } else {
            let xc = along(rho);
            let fc = obj.eval(&xc);
            (xc, fc)
        };
        if fc < values[k].min(fr) {
            simplex[k] = xc;
            values[k] = fc;
            continue;
        }
        for i in 1..=k {
            let shrunk: Vec<f64> = (0..k)
                .map(|j| simplex[0][j] + sigma * (simplex[i][j] - simplex[0][j]))
                .collect();
            values[i] = obj.eval(&shrunk);
            simplex[i] = shrunk;
        }
    }
}

/// Hessian by central second differences with step
/// `h_i = max(1e-4, 1e-4 |x_i|)`, symmetrized. With `project_psd` set,
/// eigenvalues below `1e-10` are raised to that floor and a warning is
/// logged; use this for the Hessian of a negative log-likelihood.
pub fn numerical_hessian<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], project_psd: bool) -> Result<Matrix> {
    let k = x.len();
    if k == 0 {
        return Err(Error::input("Hessian needs at least one coordinate"));
    }
    let h: Vec<f64> = x.iter().map(|v| 1e-4_f64.max(1e-4 * v.abs())).collect();
    let f0 = f(x);
    let mut work = x.to_vec();
    let mut hess = Matrix::zeros(k, k);
    for i in 0..k {
        work[i] = x[i] + h[i];
        let up = f(&work);
        work[i] = x[i] - h[i];
        let dn = f(&work);
        work[i] = x[i];
        hess[(i, i)] = (up - 2.0 * f0 + dn) / (h[i] * h[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                work[i] = x[i] + si * h[i];
                work[j] = x[j] + sj * h[j];
                let v = f(&work);
                work[i] = x[i];
                work[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    if !linalg::all_finite(&hess) {
        return Err(Error::EstimationFailure {
            reason: format!("numerical Hessian has non-finite entries at {x:?}"),
            starts: Vec::new(),
        });
    }
    let hess = linalg::symmetrize(&hess);
    if project_psd {
        let (fixed, clipped) = linalg::clip_psd(&hess, linalg::EIGEN_FLOOR);
        if clipped {
            log::warn!("numerical Hessian was not positive semidefinite; negative eigenvalues floored");
            return Ok(fixed);
        }
    }
    Ok(hess)
}

/// Checks that `x` has the expected number of coordinates.
pub fn check_dimension(x: &[f64], k: usize) -> Result<()> {
    if x.len() == k {
        Ok(())
    } else {
        Err(Error::input(format!("expected {k} coordinates, got {}", x.len())))
    }
}
