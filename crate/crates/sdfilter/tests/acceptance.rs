//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;

use sdfilter::commands::{cmd_experiment, Invocation};
use sdfilter::config::RunConfig;
use sdfilter::harness::{run_experiment, ExperimentConfig, ExperimentReport};
use sdfilter_core::estimation::{fit, FitConfig, ModelSpec};
use sdfilter_core::lgss::{
    kalman_filter, kalman_filter_score_form, kalman_smoother, kalman_smoother_score_form, random_stable_system,
};
use sdfilter_core::linalg::{relative_error, relative_error_scalar, relative_error_vec};
use sdfilter_core::models::{
    simulate_ssm, AnyModel, Family, GaussianScale, LinearGaussian, PoissonDuration, PoissonLink, StudentTLocation,
    StudentTScale, TwoComponentSv,
};
use sdfilter_core::particle::{fit_particle_likelihood, particle_filter, PfOptions};
use sdfilter_core::rng::seeded;
use sdfilter_core::score_engine::{sd_filter, sd_smoother, ObservationModel};
use sdfilter_core::{stats, GaussianState, Matrix, NormalizationScheme, SdOptions, SystemMatrices, TransitionSpec, Vector};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn kalman_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = seeded(1);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let (m, p) = (1 + i % 3, 1 + (i / 3) % 3);
        let sys = random_stable_system(&mut rng, m, p);
        let init = sys.stationary_state().map_err(|e| e.to_string())?;
        let (_, y) = sys.simulate(&init, 300, &mut rng);
        let a = kalman_filter(&sys, &y, &init).map_err(|e| e.to_string())?;
        let b = kalman_filter_score_form(&sys, &y, &init).map_err(|e| e.to_string())?;
        worst = worst.max(relative_error_scalar(a.loglik(), b.loglik()));
        for (x, z) in a.steps.iter().zip(&b.steps) {
            worst = worst
                .max(relative_error_vec(&x.pred.a, &z.pred.a))
                .max(relative_error(&x.pred.p, &z.pred.p))
                .max(relative_error_vec(&x.upd.a, &z.upd.a))
                .max(relative_error(&x.upd.p, &z.upd.p));
        }
        let sa = kalman_smoother(&sys, &a).map_err(|e| e.to_string())?;
        let sb = kalman_smoother_score_form(&sys, &b).map_err(|e| e.to_string())?;
        for (x, z) in sa.steps.iter().zip(&sb.steps) {
            worst = worst
                .max(relative_error_vec(&x.mean, &z.mean))
                .max(relative_error(&x.cov, &z.cov));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst <= 1e-10 && secs < 10.0,
        format!("max relative error {worst:.2e} over 100 systems in {secs:.2} s"),
    )
}

fn golden_ratio() -> Outcome {
    // fixed point of P <- P H / (P + H) + Q with H = Q = 1
    let mut fixed = 1.0f64;
    for _ in 0..200 {
        fixed = fixed / (fixed + 1.0) + 1.0;
    }
    let frozen = 1.618_033_988_749_895;
    let one = || Matrix::from_element(1, 1, 1.0);
    let sys = SystemMatrices::new(one(), one(), one(), one(), Vector::zeros(1)).map_err(|e| e.to_string())?;
    let init = GaussianState::scalar(0.0, 1.0).map_err(|e| e.to_string())?;
    let y: Vec<Vector> = (0..60).map(|t| Vector::from_element(1, (t as f64 * 0.37).sin())).collect();
    let a = kalman_filter(&sys, &y, &init).map_err(|e| e.to_string())?;
    let b = kalman_filter_score_form(&sys, &y, &init).map_err(|e| e.to_string())?;
    let pa = a.steps[50].pred.p[(0, 0)];
    let pb = b.steps[50].pred.p[(0, 0)];
    let err = (pa - fixed).abs().max((pb - fixed).abs());
    check(
        err < 1e-9 && (fixed - frozen).abs() < 1e-15,
        format!("P after 50 steps {pa:.12} (score form {pb:.12}), error {err:.1e}"),
    )
}

/// Model of `family` at randomly drawn static parameters, plus a state
/// drawn in the region where the family is evaluated.
fn random_case(family: Family, rng: &mut impl Rng, i: usize) -> (AnyModel, Vec<f64>) {
    let nu = rng.random_range(2.5..30.0);
    let omega = rng.random_range(-1.0..1.0);
    match family {
        Family::StudentTLocation => (
            AnyModel::StudentTLocation(StudentTLocation::new(rng.random_range(-1.0..1.0), nu).unwrap()),
            vec![rng.random_range(-2.0..2.0)],
        ),
        Family::GaussianScale => (
            AnyModel::GaussianScale(GaussianScale::new(omega).unwrap()),
            vec![rng.random_range(-1.5..1.5)],
        ),
        Family::StudentTScale => (
            AnyModel::StudentTScale(StudentTScale::new(omega, nu).unwrap()),
            vec![rng.random_range(-1.5..1.5)],
        ),
        Family::Poisson if i % 2 == 0 => (
            AnyModel::Poisson(PoissonDuration::new(PoissonLink::Identity)),
            vec![rng.random_range(0.3..5.0)],
        ),
        Family::Poisson => (
            AnyModel::Poisson(PoissonDuration::new(PoissonLink::Log)),
            vec![rng.random_range(-1.5..1.5)],
        ),
        Family::TwoComponentSv => (
            AnyModel::TwoComponentSv(TwoComponentSv::new(omega, nu).unwrap()),
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        ),
    }
}

fn derivative_correctness() -> Outcome {
    let started = Instant::now();
    let mut rng = seeded(3);
    let h = 1e-5;
    let rel = |x: f64, fd: f64| (x - fd).abs() / x.abs().max(1e-2);
    let (mut worst_score, mut worst_hess) = (0.0f64, 0.0f64);
    for family in Family::ALL {
        for i in 0..1000 {
            let (model, a) = random_case(family, &mut rng, i);
            let y = model.simulate_observation(&a, &mut rng);
            let y = y.as_slice();
            let score = model.score(y, &a);
            let hess = model.hessian(y, &a);
            for j in 0..a.len() {
                let (mut up, mut dn) = (a.clone(), a.clone());
                up[j] += h;
                dn[j] -= h;
                let fd = (model.log_density(y, &up) - model.log_density(y, &dn)) / (2.0 * h);
                worst_score = worst_score.max(rel(score[j], fd));
                let (su, sd) = (model.score(y, &up), model.score(y, &dn));
                for k in 0..a.len() {
                    worst_hess = worst_hess.max(rel(hess[(j, k)], (su[k] - sd[k]) / (2.0 * h)));
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst_score < 1e-6 && worst_hess < 1e-5 && secs < 5.0,
        format!("max score error {worst_score:.2e}, max Hessian error {worst_hess:.2e}, {secs:.2} s"),
    )
}

fn gaussian_reduction() -> Outcome {
    let mut rng = seeded(4);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let sys = random_stable_system(&mut rng, 1 + i % 3, 1 + (i / 3) % 3);
        let init = sys.stationary_state().map_err(|e| e.to_string())?;
        let (_, y) = sys.simulate(&init, 200, &mut rng);
        let model = LinearGaussian::new(sys.z.clone(), sys.h.clone()).map_err(|e| e.to_string())?;
        let trans = TransitionSpec::new(sys.c.clone(), sys.t.clone(), sys.q.clone()).map_err(|e| e.to_string())?;
        let norm = NormalizationScheme::KalmanConsistent;
        let sd = sd_filter(&model, &trans, &norm, &y, &init, &SdOptions::default()).map_err(|e| e.to_string())?;
        let kf = kalman_filter(&sys, &y, &init).map_err(|e| e.to_string())?;
        worst = worst.max(relative_error_scalar(sd.loglik(), kf.loglik()));
        for (x, z) in sd.steps.iter().zip(&kf.steps) {
            worst = worst
                .max(relative_error_vec(&x.pred.a, &z.pred.a))
                .max(relative_error(&x.pred.p, &z.pred.p))
                .max(relative_error_vec(&x.upd.a, &z.upd.a))
                .max(relative_error(&x.upd.p, &z.upd.p));
        }
        let ss = sd_smoother(&model, &trans, &sd).map_err(|e| e.to_string())?;
        let ks = kalman_smoother(&sys, &kf).map_err(|e| e.to_string())?;
        for (x, z) in ss.steps.iter().zip(&ks.steps) {
            worst = worst
                .max(relative_error_vec(&x.mean, &z.mean))
                .max(relative_error(&x.cov, &z.cov));
        }
    }
    check(worst <= 1e-10, format!("max relative error {worst:.2e} over 20 systems"))
}

fn mse_table(report: &ExperimentReport, secs: f64) -> Outcome {
    let mut ok = secs < 3600.0;
    let mut parts = Vec::new();
    for m in &report.models {
        let r: Vec<f64> = m.mse.iter().map(|x| x.ratio).collect();
        let sd: Vec<f64> = m.mse.iter().map(|x| x.sd).collect();
        let ordered = sd[2] < sd[1] && sd[1] < sd[0];
        ok &= r.iter().all(|x| *x <= 1.05) && ordered && m.completed == report.config.replications;
        parts.push(format!(
            "{} ratios {:.3}/{:.3}/{:.3} ordered {ordered} completed {}/{}",
            m.family,
            r[0],
            r[1],
            r[2],
            m.completed,
            report.config.replications
        ));
        for f in &m.failures {
            parts.push(format!("{} replication {} failed: {}", m.family, f.replication, f.error));
        }
    }
    parts.push(format!("{secs:.0} s"));
    check(ok, parts.join("; "))
}

fn coverage_table(report: &ExperimentReport) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let k = report.models.len() as f64;
    for (i, &level) in report.config.levels.iter().enumerate() {
        let avg = report.models.iter().map(|m| m.coverage[i].combined).sum::<f64>() / k;
        ok &= (avg - level).abs() <= 0.03;
        parts.push(format!("combined {level}: {avg:.4}"));
        if (level - 0.95).abs() < 1e-12 {
            for m in &report.models {
                let p = m.coverage[i].parameter;
                ok &= p <= level - 0.04;
                parts.push(format!("{} parameter-only {p:.4}", m.family));
            }
        }
    }
    check(ok, parts.join("; "))
}

fn error_scaling() -> Outcome {
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    let mut parts = Vec::new();
    for q in [0.1, 0.01, 0.001] {
        let model = GaussianScale::new(0.1).map_err(|e| e.to_string())?;
        let trans = TransitionSpec::ar1(0.0, 0.98, q).map_err(|e| e.to_string())?;
        let sample = simulate_ssm(&model, &trans, 1000, 77).map_err(|e| e.to_string())?;
        let init = trans.stationary_state().map_err(|e| e.to_string())?;
        let norm = NormalizationScheme::KalmanConsistent;
        let run = sd_filter(&model, &trans, &norm, &sample.observations, &init, &SdOptions::default())
            .map_err(|e| e.to_string())?;
        let pf = particle_filter(&model, &trans, &sample.observations, &init, &PfOptions::new(10_000, 3))
            .map_err(|e| e.to_string())?;
        let gap: Vec<f64> = run.steps.iter().zip(&pf.steps).map(|(a, b)| (a.upd.a[0] - b.mean[0]).abs()).collect();
        let p: Vec<f64> = run.steps.iter().map(|a| a.pred.p[(0, 0)]).collect();
        parts.push(format!("q {q}: gap {:.3e} p {:.3e}", stats::mean(&gap), stats::mean(&p)));
        lx.push(stats::mean(&p).ln());
        ly.push(stats::mean(&gap).ln());
    }
    let slope = stats::ols_slope(&lx, &ly);
    parts.push(format!("slope {slope:.3}"));
    check(slope >= 0.8 && ly[0] > ly[1] && ly[1] > ly[2], parts.join("; "))
}

fn speed() -> Outcome {
    let (model, trans) = Family::GaussianScale.reference_design();
    let y = simulate_ssm(&model, &trans, 1000, 8).map_err(|e| e.to_string())?.observations;
    let spec = ModelSpec::new(Family::GaussianScale);
    // one start on both sides so the optimizer protocol is the same
    let cfg = FitConfig {
        starts: 1,
        seed: 8,
        ..FitConfig::default()
    };
    let started = Instant::now();
    let fitted = fit(&spec, &y, &cfg).map_err(|e| e.to_string())?;
    let s = fitted.setup().map_err(|e| e.to_string())?;
    sd_filter(&s.model, &s.trans, &s.norm, &y, &s.init, &SdOptions::default()).map_err(|e| e.to_string())?;
    let sd_secs = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let pf = fit_particle_likelihood(&spec, &y, 400, &cfg, 2000).map_err(|e| e.to_string())?;
    let pf_secs = started.elapsed().as_secs_f64();
    let ratio = pf_secs / sd_secs;
    check(
        ratio >= 50.0,
        format!(
            "score-driven {sd_secs:.3} s, particle likelihood {pf_secs:.2} s ({} evaluations), ratio {ratio:.0}",
            pf.evaluations
        ),
    )
}

fn determinism() -> Outcome {
    let experiment: ExperimentConfig = serde_json::from_str(
        r#"{"replications": 3, "n": 400, "particles": 200, "trajectories": 20, "band_draws": 100, "raw_losses": true}"#,
    )
    .map_err(|e| e.to_string())?;
    let config = RunConfig {
        seed: Some(21),
        experiment: Some(experiment),
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outs: Vec<PathBuf> = ["a", "b"].iter().map(|d| dir.path().join(d)).collect();
    for out in &outs {
        let inv = Invocation::new(config.clone(), PathBuf::new(), out.clone(), None);
        cmd_experiment(&inv).map_err(|e| e.to_string())?;
    }
    let mut compared = 0;
    for name in ["experiment_report.json", "table_mse.csv", "table_coverage.csv", "raw_losses.csv"] {
        let a = std::fs::read(outs[0].join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(outs[1].join(name)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{name} differs between runs"));
        }
        compared += a.len();
    }
    Ok(format!("4 output files, {compared} bytes, identical"))
}

fn run(results: &mut Vec<bool>, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {id} ({name}): {detail}");
    results.push(outcome.is_ok());
}

fn main() {
    let mut results = Vec::new();
    run(&mut results, 1, "Kalman equivalence", kalman_equivalence);
    run(&mut results, 2, "golden-ratio steady state", golden_ratio);
    run(&mut results, 3, "derivative correctness", derivative_correctness);
    run(&mut results, 4, "Gaussian reduction", gaussian_reduction);
    let started = Instant::now();
    let report = catch_unwind(|| run_experiment(&ExperimentConfig::default(), 2024));
    let secs = started.elapsed().as_secs_f64();
    match report {
        Ok(Ok(report)) => {
            run(&mut results, 5, "MSE against the particle reference", || mse_table(&report, secs));
            run(&mut results, 6, "band coverage", || coverage_table(&report));
        }
        other => {
            let msg = match other {
                Ok(Err(e)) => e.to_string(),
                _ => String::from("experiment panicked"),
            };
            run(&mut results, 5, "MSE against the particle reference", || Err(msg.clone()));
            run(&mut results, 6, "band coverage", || Err(msg.clone()));
        }
    }
    run(&mut results, 7, "error scaling", error_scaling);
    run(&mut results, 8, "speed", speed);
    run(&mut results, 9, "determinism", determinism);
    let passed = results.iter().filter(|x| **x).count();
    println!("{passed} of {} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
