//! Confidence bands for the filtered and smoothed state.
//!
//! Three regimes: filtering uncertainty only (normal bands on the filter
//! variance), parameter uncertainty only (empirical quantiles of the filter
//! mean across draws `theta_b ~ N(theta_hat, Sigma_hat)`), and both, where
//! the total variance is
//!
//! ```text
//! E_theta[P_t] + E_theta[(a_t^theta - a_t^theta_hat)^2]
//! ```
//!
//! and the band is normal around the plug-in mean.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimation::{FilterSetup, FitResult};
use crate::lgss::SmootherRun;
use crate::linalg;
use crate::math::sqrt;
use crate::rng::seeded;
use crate::score_engine::{sd_filter, sd_smoother, SdFilterRun, SdOptions};
use crate::stats;
use crate::Vector;

/// Smallest draw count accepted for the simulation regimes.
pub const MIN_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandRegime {
    FilteringOnly,
    ParameterOnly,
    Combined,
}

/// Which state estimate the band is built around.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandTarget {
    Predictive,
    Update,
    Smoothed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandSpec {
    /// Nominal coverage in `(0, 1)`.
    pub level: f64,
    pub regime: BandRegime,
    pub target: BandTarget,
    /// Number of parameter draws for the simulation regimes.
    pub draws: usize,
    pub seed: u64,
    /// State component the band refers to.
    pub component: usize,
}

impl BandSpec {
    pub fn new(level: f64, regime: BandRegime, target: BandTarget) -> Self {
        BandSpec {
            level,
            regime,
            target,
            draws: 1000,
            seed: 0,
            component: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::input(format!("band level {} is not in (0, 1)", self.level)));
        }
        if self.regime != BandRegime::FilteringOnly && self.draws < MIN_DRAWS {
            return Err(Error::input(format!(
                "simulation bands need at least {MIN_DRAWS} draws, got {}",
                self.draws
            )));
        }
        Ok(())
    }
}

/// Per-step bounds and the variance decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSeries {
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub var_total: Vec<f64>,
    pub var_filtering: Vec<f64>,
    pub var_parameter: Vec<f64>,
}

impl BandSeries {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Steps `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> BandSeries {
        BandSeries {
            mean: self.mean[start..end].to_vec(),
            lower: self.lower[start..end].to_vec(),
            upper: self.upper[start..end].to_vec(),
            var_total: self.var_total[start..end].to_vec(),
            var_filtering: self.var_filtering[start..end].to_vec(),
            var_parameter: self.var_parameter[start..end].to_vec(),
        }
    }

    pub fn width(&self, t: usize) -> f64 {
        self.upper[t] - self.lower[t]
    }
}

/// Per-step mean and variance of one state component.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_component(component: usize, dim: usize) -> Result<()> {
    if component >= dim {
        return Err(Error::input(format!(
            "state component {component} out of range for dimension {dim}"
        )));
    }
    Ok(())
}

/// Predictive or update moments from a filter run.
pub fn filter_moments(run: &SdFilterRun, target: BandTarget, component: usize) -> Result<StateMoments> {
    let i = component;
    if let Some(s) = run.steps.first() {
        check_component(i, s.pred.dim())?;
    }
    let pick = |s: &crate::score_engine::SdStep| match target {
        BandTarget::Predictive => Ok((s.pred.a[i], s.pred.p[(i, i)])),
        BandTarget::Update => Ok((s.upd.a[i], s.upd.p[(i, i)])),
        BandTarget::Smoothed => Err(Error::input("smoothed moments need a smoother run")),
    };
    let (mean, var) = run.steps.iter().map(pick).collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok(StateMoments { mean, var })
}

/// Smoothed moments.
pub fn smoother_moments(run: &SmootherRun, component: usize) -> Result<StateMoments> {
    if let Some(s) = run.steps.first() {
        check_component(component, s.mean.len())?;
    }
    let (mean, var) = run
        .steps
        .iter()
        .map(|s| (s.mean[component], s.cov[(component, component)]))
        .unzip();
    Ok(StateMoments { mean, var })
}

/// Runs the filter (and the smoother when asked) for one parameter setup.
pub fn run_moments(setup: &FilterSetup, y: &[Vector], target: BandTarget, component: usize) -> Result<StateMoments> {
    let run = sd_filter(
        &setup.model,
        &setup.trans,
        &setup.norm,
        y,
        &setup.init,
        &SdOptions::default(),
    )?;
    match target {
        BandTarget::Smoothed => smoother_moments(&sd_smoother(&setup.model, &setup.trans, &run)?, component),
        _ => filter_moments(&run, target, component),
    }
}

fn check_variance(t: usize, v: f64) -> Result<()> {
    if v < 0.0 || v.is_nan() {
        return Err(Error::Invariant(format!("negative variance {v} at step {t}")));
    }
    Ok(())
}

/// Normal bands `mean +- z sqrt(var)` from the filter variance alone.
pub fn bands_filtering_only(moments: &StateMoments, spec: &BandSpec) -> Result<BandSeries> {
    spec.validate()?;
    if moments.mean.len() != moments.var.len() {
        return Err(Error::input("means and variances differ in length"));
    }
    let z = stats::two_sided_z(spec.level);
    let n = moments.mean.len();
    let mut out = BandSeries {
        mean: moments.mean.clone(),
        lower: Vec::with_capacity(n),
        upper: Vec::with_capacity(n),
        var_total: moments.var.clone(),
        var_filtering: moments.var.clone(),
        var_parameter: alloc::vec![0.0; n],
    };
    for (t, (&m, &v)) in moments.mean.iter().zip(&moments.var).enumerate() {
        check_variance(t, v)?;
        let half = z * sqrt(v);
        out.lower.push(m - half);
        out.upper.push(m + half);
    }
    Ok(out)
}

/// Draws `count` parameter vectors from `N(theta_hat, Sigma_hat)` in natural
/// coordinates. Draws outside the parameter domain, or for which the model
/// cannot be built, are rejected and redrawn; more rejections than
/// requested draws is an error.
pub fn draw_parameters(fit: &FitResult, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    rejection_draws(fit, count, seed, |theta| fit.spec.build(theta).ok().map(|_| theta.to_vec()))
}

/// Moments of `target` at `count` accepted parameter draws. A draw is
/// rejected when it leaves the domain or its filter fails numerically;
/// rejections share the budget of [`draw_parameters`].
pub fn draw_moments(
    fit: &FitResult,
    y: &[Vector],
    target: BandTarget,
    component: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<StateMoments>> {
    rejection_draws(fit, count, seed, |theta| {
        let setup = fit.spec.build(theta).ok()?;
        match run_moments(&setup, y, target, component) {
            Ok(m) => Some(m),
            Err(e) => {
                log::debug!("parameter draw rejected: {e}");
                None
            }
        }
    })
}

fn rejection_draws<T>(
    fit: &FitResult,
    count: usize,
    seed: u64,
    mut accept: impl FnMut(&[f64]) -> Option<T>,
) -> Result<Vec<T>> {
    let k = fit.params.len();
    let root = linalg::psd_sqrt(&linalg::symmetrize(&fit.covariance));
    let center = Vector::from_column_slice(&fit.params.values);
    let mut rng = seeded(seed);
    let mut accepted = Vec::with_capacity(count);
    let mut rejected = 0usize;
    while accepted.len() < count {
        let z = Vector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta: Vec<f64> = (&center + &root * z).iter().copied().collect();
        let in_domain = theta.iter().zip(&fit.params.transforms).all(|(v, t)| t.in_domain(*v));
        match in_domain.then(|| accept(&theta)).flatten() {
            Some(x) => accepted.push(x),
            None => {
                rejected += 1;
                if rejected > count {
                    return Err(Error::PriorDomain {
                        rejected,
                        attempted: rejected + accepted.len(),
                    });
                }
            }
        }
    }
    if rejected > 0 {
        log::info!("{rejected} parameter draws rejected");
    }
    Ok(accepted)
}

/// Aggregates per-draw moments into the requested band regime. `plug_in`
/// are the moments at `theta_hat`; `draws` the moments at each parameter
/// draw, in draw order.
pub fn aggregate_draws(plug_in: &StateMoments, draws: &[StateMoments], spec: &BandSpec) -> Result<BandSeries> {
    spec.validate()?;
    let n = plug_in.mean.len();
    if draws.is_empty() {
        return Err(Error::input("no parameter draws to aggregate"));
    }
    if draws.iter().any(|d| d.mean.len() != n || d.var.len() != n) {
        return Err(Error::input("draw moments differ in length from the plug-in moments"));
    }
    let b = draws.len() as f64;
    let z = stats::two_sided_z(spec.level);
    let (lo_p, hi_p) = (0.5 * (1.0 - spec.level), 0.5 * (1.0 + spec.level));
    let mut out = BandSeries {
        mean: plug_in.mean.clone(),
        lower: Vec::with_capacity(n),
        upper: Vec::with_capacity(n),
        var_total: Vec::with_capacity(n),
        var_filtering: Vec::with_capacity(n),
        var_parameter: Vec::with_capacity(n),
    };
    let mut column = Vec::with_capacity(draws.len());
    for t in 0..n {
        let (a_hat, p_hat) = (plug_in.mean[t], plug_in.var[t]);
        // deviations from the plug-in values, so identical draws reproduce
        // the plug-in variance exactly
        let mut dp = 0.0;
        let mut da2 = 0.0;
        column.clear();
        for d in draws {
            check_variance(t, d.var[t])?;
            dp += d.var[t] - p_hat;
            let e = d.mean[t] - a_hat;
            da2 += e * e;
            column.push(d.mean[t]);
        }
        let var_param = da2 / b;
        match spec.regime {
            BandRegime::ParameterOnly => {
                column.sort_by(f64::total_cmp);
                out.lower.push(stats::quantile_sorted(&column, lo_p));
                out.upper.push(stats::quantile_sorted(&column, hi_p));
                out.var_filtering.push(0.0);
                out.var_parameter.push(var_param);
                out.var_total.push(var_param);
            }
            BandRegime::Combined | BandRegime::FilteringOnly => {
                let var_filt = if spec.regime == BandRegime::Combined {
                    (p_hat + dp / b).max(0.0)
                } else {
                    p_hat
                };
                check_variance(t, var_filt)?;
                let var_param = if spec.regime == BandRegime::Combined { var_param } else { 0.0 };
                let total = var_filt + var_param;
                let half = z * sqrt(total);
                out.lower.push(a_hat - half);
                out.upper.push(a_hat + half);
                out.var_filtering.push(var_filt);
                out.var_parameter.push(var_param);
                out.var_total.push(total);
            }
        }
    }
    Ok(out)
}

fn simulation_bands(fit: &FitResult, y: &[Vector], spec: &BandSpec) -> Result<BandSeries> {
    spec.validate()?;
    let plug_in = run_moments(&fit.setup()?, y, spec.target, spec.component)?;
    let draws = draw_moments(fit, y, spec.target, spec.component, spec.draws, spec.seed)?;
    aggregate_draws(&plug_in, &draws, spec)
}

/// Bands from parameter uncertainty only: empirical type-7 quantiles of the
/// state estimate across parameter draws.
pub fn bands_parameter_only(fit: &FitResult, y: &[Vector], spec: &BandSpec) -> Result<BandSeries> {
    if spec.regime != BandRegime::ParameterOnly {
        return Err(Error::input("bands_parameter_only needs the parameter-only regime"));
    }
    simulation_bands(fit, y, spec)
}

/// Bands from filtering and parameter uncertainty.
pub fn bands_combined(fit: &FitResult, y: &[Vector], spec: &BandSpec) -> Result<BandSeries> {
    if spec.regime != BandRegime::Combined {
        return Err(Error::input("bands_combined needs the combined regime"));
    }
    simulation_bands(fit, y, spec)
}

/// Bands for any regime from a fitted model.
pub fn bands(fit: &FitResult, y: &[Vector], spec: &BandSpec) -> Result<BandSeries> {
    match spec.regime {
        BandRegime::FilteringOnly => {
            let m = run_moments(&fit.setup()?, y, spec.target, spec.component)?;
            bands_filtering_only(&m, spec)
        }
        _ => simulation_bands(fit, y, spec),
    }
}

/// Fraction of steps with `lower <= truth <= upper`.
pub fn coverage_rate(bands: &BandSeries, truth: &[f64]) -> Result<f64> {
    if bands.len() != truth.len() {
        return Err(Error::input(format!(
            "bands have {} steps but the truth has {}",
            bands.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::input("coverage of an empty series"));
    }
    let hits = truth
        .iter()
        .enumerate()
        .filter(|&(t, &x)| bands.lower[t] <= x && x <= bands.upper[t])
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{fit as fit_model, FitConfig, ModelSpec};
    use crate::lgss::{kalman_filter, random_stable_system, SystemMatrices};
    use crate::models::{simulate_ssm, Family};
    use crate::{Matrix, Vector};

    fn spec(level: f64, regime: BandRegime) -> BandSpec {
        BandSpec::new(level, regime, BandTarget::Predictive)
    }

    #[test]
    fn standard_normal_band() {
        let m = StateMoments {
            mean: alloc::vec![0.0, 2.0],
            var: alloc::vec![1.0, 0.0],
        };
        let b = bands_filtering_only(&m, &spec(0.95, BandRegime::FilteringOnly)).unwrap();
        assert!((b.upper[0] - 1.959963984540054).abs() < 1e-6);
        assert!((b.lower[0] + 1.959963984540054).abs() < 1e-6);
        assert_eq!((b.lower[1], b.upper[1]), (2.0, 2.0));
        let bad = StateMoments {
            mean: alloc::vec![0.0],
            var: alloc::vec![-1.0],
        };
        assert!(matches!(
            bands_filtering_only(&bad, &spec(0.95, BandRegime::FilteringOnly)),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(spec(1.0, BandRegime::FilteringOnly).validate().is_err());
        assert!(spec(0.0, BandRegime::FilteringOnly).validate().is_err());
        let mut s = spec(0.9, BandRegime::Combined);
        s.draws = 99;
        assert!(s.validate().is_err());
    }

    #[test]
    fn coverage_edge_cases() {
        let b = BandSeries {
            mean: alloc::vec![0.0; 3],
            lower: alloc::vec![-1.0; 3],
            upper: alloc::vec![1.0; 3],
            var_total: alloc::vec![1.0; 3],
            var_filtering: alloc::vec![1.0; 3],
            var_parameter: alloc::vec![0.0; 3],
        };
        assert_eq!(coverage_rate(&b, &[0.0, 0.5, -1.0]).unwrap(), 1.0);
        assert_eq!(coverage_rate(&b, &[2.0, 5.0, -1.5]).unwrap(), 0.0);
        assert!(coverage_rate(&b, &[0.0]).is_err());
    }

    fn kalman_coverage(level: f64) -> f64 {
        let mut rng = seeded(17);
        let mut hits = 0usize;
        let mut total = 0usize;
        while total < 100_000 {
            let sys = random_stable_system(&mut rng, 1, 1);
            let init = sys.stationary_state().unwrap();
            let (states, obs) = sys.simulate(&init, 1000, &mut rng);
            let run = kalman_filter(&sys, &obs, &init).unwrap();
            let moments = StateMoments {
                mean: run.steps.iter().map(|s| s.pred.a[0]).collect(),
                var: run.steps.iter().map(|s| s.pred.p[(0, 0)]).collect(),
            };
            let b = bands_filtering_only(&moments, &spec(level, BandRegime::FilteringOnly)).unwrap();
            let truth: Vec<f64> = states.iter().map(|s| s[0]).collect();
            hits += (coverage_rate(&b, &truth).unwrap() * 1000.0).round() as usize;
            total += 1000;
        }
        hits as f64 / total as f64
    }

    #[test]
    fn kalman_bands_have_nominal_coverage() {
        for level in [0.90, 0.95] {
            let c = kalman_coverage(level);
            assert!((c - level).abs() < 0.01, "level {level}: coverage {c}");
        }
    }

    fn fitted() -> (FitResult, Vec<Vector>) {
        let (model, trans) = Family::GaussianScale.reference_design();
        let y = simulate_ssm(&model, &trans, 400, 21).unwrap().observations;
        let f = fit_model(&ModelSpec::new(Family::GaussianScale), &y, &FitConfig::default()).unwrap();
        (f, y)
    }

    #[test]
    fn zero_parameter_covariance_degenerates() {
        let (mut f, y) = fitted();
        f.covariance = Matrix::zeros(f.params.len(), f.params.len());
        let mut s = spec(0.95, BandRegime::Combined);
        s.draws = 100;
        let filt = bands(&f, &y, &spec(0.95, BandRegime::FilteringOnly)).unwrap();
        let comb = bands_combined(&f, &y, &s).unwrap();
        assert_eq!(filt, comb);
        s.regime = BandRegime::ParameterOnly;
        let par = bands_parameter_only(&f, &y, &s).unwrap();
        assert_eq!(par.lower, par.mean);
        assert_eq!(par.upper, par.mean);
    }

    #[test]
    fn decomposition_and_ordering() {
        let (f, y) = fitted();
        let mut s = spec(0.95, BandRegime::Combined);
        s.draws = 200;
        s.seed = 4;
        let comb = bands_combined(&f, &y, &s).unwrap();
        let again = bands_combined(&f, &y, &s).unwrap();
        assert_eq!(comb, again);
        let z = stats::two_sided_z(0.95);
        for t in 0..comb.len() {
            assert!(comb.var_filtering[t] >= 0.0 && comb.var_parameter[t] >= 0.0);
            let sum = comb.var_filtering[t] + comb.var_parameter[t];
            assert!((sum - comb.var_total[t]).abs() <= 1e-10);
            let w = comb.width(t);
            assert!(w + 1e-12 >= 2.0 * z * comb.var_filtering[t].sqrt());
            assert!(w + 1e-12 >= 2.0 * z * comb.var_parameter[t].sqrt());
        }
    }

    #[test]
    fn parameter_band_draw_count_stability() {
        let (f, y) = fitted();
        let mut s = spec(0.95, BandRegime::ParameterOnly);
        s.seed = 8;
        s.draws = 100;
        let small = bands_parameter_only(&f, &y, &s).unwrap();
        s.draws = 1000;
        let large = bands_parameter_only(&f, &y, &s).unwrap();
        let mut rel = Vec::new();
        for t in 0..large.len() {
            let w = large.width(t);
            if w > 0.0 {
                let d = (small.lower[t] - large.lower[t]).abs().max((small.upper[t] - large.upper[t]).abs());
                rel.push(d / w);
            }
        }
        let mean_rel = stats::mean(&rel);
        assert!(mean_rel < 0.10, "mean relative bound difference {mean_rel}");
    }

    #[test]
    fn rejection_budget() {
        let (mut f, y) = fitted();
        let k = f.params.len();
        // phi has a huge variance, so most draws leave (-1, 1)
        f.covariance = Matrix::zeros(k, k);
        f.covariance[(1, 1)] = 100.0;
        let mut s = spec(0.9, BandRegime::Combined);
        s.draws = 100;
        assert!(matches!(bands_combined(&f, &y, &s), Err(Error::PriorDomain { .. })));
    }

    #[test]
    fn coverage_non_decreasing_in_level() {
        let sys = SystemMatrices::new(
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 0.9),
            Matrix::from_element(1, 1, 0.3),
            Vector::zeros(1),
        )
        .unwrap();
        let init = sys.stationary_state().unwrap();
        let (states, obs) = sys.simulate(&init, 2000, &mut seeded(3));
        let run = kalman_filter(&sys, &obs, &init).unwrap();
        let m = StateMoments {
            mean: run.steps.iter().map(|s| s.pred.a[0]).collect(),
            var: run.steps.iter().map(|s| s.pred.p[(0, 0)]).collect(),
        };
        let truth: Vec<f64> = states.iter().map(|s| s[0]).collect();
        let mut last = 0.0;
        for level in [0.5, 0.8, 0.9, 0.95, 0.99] {
            let c = coverage_rate(&bands_filtering_only(&m, &spec(level, BandRegime::FilteringOnly)).unwrap(), &truth)
                .unwrap();
            assert!(c >= last);
            last = c;
        }
    }
}
