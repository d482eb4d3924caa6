use super::*;
use crate::models::simulate_ssm;
use crate::score_engine::ObservationModel;

fn series(family: Family, n: usize, seed: u64) -> Vec<Vector> {
    let (model, trans) = family.reference_design();
    simulate_ssm(&model, &trans, n, seed).unwrap().observations
}

#[test]
fn transforms_round_trip() {
    for (t, v) in [
        (Transform::Identity, -3.2),
        (Transform::Log, 0.01),
        (Transform::Tanh, 0.98),
        (Transform::LogShifted2, 5.0),
    ] {
        assert!(t.in_domain(v));
        assert!((t.to_natural(t.to_free(v)) - v).abs() < 1e-12 * v.abs().max(1.0));
    }
    assert!(!Transform::Tanh.in_domain(1.0));
    assert!(!Transform::LogShifted2.in_domain(2.0));
}

#[test]
fn short_series_rejected() {
    let spec = ModelSpec::new(Family::GaussianScale);
    let y = series(Family::GaussianScale, 49, 1);
    assert!(matches!(
        fit(&spec, &y, &FitConfig::default()),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn layouts_and_build() {
    let spec = ModelSpec::new(Family::StudentTLocation);
    assert_eq!(spec.names(), ["c", "phi", "q", "lambda", "nu"]);
    let s = spec.build(&[0.01, 0.98, 0.01, 0.01, 5.0]).unwrap();
    assert_eq!(s.model.family(), Some(Family::StudentTLocation));
    assert!((s.init.a[0] - 0.5).abs() < 1e-12);
    assert!(spec.build(&[0.0, 1.0, 0.01, 0.0, 5.0]).is_err());

    let scaled = ModelSpec::new(Family::GaussianScale)
        .with_normalization(NormalizationKind::ScaledScore(ScoreScaling::ModelDefault));
    assert_eq!(scaled.names(), ["c", "phi", "loading", "omega"]);
    let s = scaled.build(&[0.0, 0.9, 0.05, 0.1]).unwrap();
    assert_eq!(s.trans.q[(0, 0)], 0.0);

    let two = ModelSpec::new(Family::TwoComponentSv);
    let s = two.build(&[0.99, 0.7, 0.005, 0.05, 0.2, 0.0, 8.0]).unwrap();
    let q12 = 0.2 * (0.005f64 * 0.05).sqrt();
    assert!((s.trans.q[(0, 1)] - q12).abs() < 1e-15);
    let two_scaled = two.with_normalization(NormalizationKind::ScaledScore(ScoreScaling::ModelDefault));
    assert!(matches!(
        two_scaled.build(&[0.99, 0.7, 0.005, 0.05, 0.2, 0.0, 8.0]),
        Err(Error::Identification(_))
    ));
}

#[test]
fn gaussian_scale_recovers_persistence() {
    let spec = ModelSpec::new(Family::GaussianScale);
    let y = series(Family::GaussianScale, 3000, 11);
    let fit = fit(&spec, &y, &FitConfig::default()).unwrap();
    assert_eq!(fit.params.get("c"), Some(0.0));
    assert_eq!(fit.fixed, ["c"]);
    let phi = fit.params.get("phi").unwrap();
    assert!(phi > 0.9 && phi < 1.0, "phi {phi}");
    assert!(fit.std_errors[0] == 0.0 && fit.std_errors[1] > 0.0);
    assert!(fit.params.in_domain());
    let again = loglik_at(&spec, &fit.params.values, &y, &SdOptions::default()).unwrap();
    assert_eq!(again, fit.loglik);
    // the optimum beats the data-driven start
    let start = loglik_at(&spec, &spec.default_start(&y), &y, &SdOptions::default()).unwrap();
    assert!(fit.loglik >= start);
}

#[test]
fn profile_fit_matches_grid_search() {
    let spec = ModelSpec::new(Family::StudentTLocation);
    let y = series(Family::StudentTLocation, 600, 5);
    let fixed = |phi: Option<f64>| {
        let mut v = alloc::vec![
            (String::from("c"), 0.0002),
            (String::from("q"), 0.01),
            (String::from("lambda"), 0.01),
            (String::from("nu"), 5.0),
        ];
        if let Some(p) = phi {
            v.push((String::from("phi"), p));
        }
        v
    };
    let config = FitConfig {
        fixed: Some(fixed(None)),
        starts: 1,
        ..FitConfig::default()
    };
    let profile = fit(&spec, &y, &config).unwrap();
    let phi_hat = profile.params.get("phi").unwrap();
    let (mut best_phi, mut best_ll) = (0.0, f64::NEG_INFINITY);
    for i in 0..=2000 {
        let phi = 0.5 + 0.4999 * i as f64 / 2000.0;
        let ll = loglik_at(&spec, &[0.0002, phi, 0.01, 0.01, 5.0], &y, &SdOptions::default()).unwrap();
        if ll > best_ll {
            best_ll = ll;
            best_phi = phi;
        }
    }
    assert!((phi_hat - best_phi).abs() < 5e-4, "{phi_hat} vs {best_phi}");
    assert!(profile.loglik >= best_ll - 1e-6);
}

#[test]
fn poisson_and_scaled_fits_run() {
    let y = series(Family::Poisson, 500, 8);
    let spec = ModelSpec::new(Family::Poisson);
    let f = fit(&spec, &y, &FitConfig::default()).unwrap();
    assert!(f.loglik.is_finite());
    let scaled = ModelSpec::new(Family::StudentTScale)
        .with_normalization(NormalizationKind::ScaledScore(ScoreScaling::ModelDefault));
    let y = series(Family::StudentTScale, 500, 8);
    let f = fit(&scaled, &y, &FitConfig::default()).unwrap();
    assert!(f.params.get("loading").unwrap() > 0.0);
}

#[test]
fn fits_are_deterministic() {
    let spec = ModelSpec::new(Family::GaussianScale);
    let y = series(Family::GaussianScale, 300, 2);
    let config = FitConfig {
        seed: 99,
        ..FitConfig::default()
    };
    assert_eq!(fit(&spec, &y, &config).unwrap(), fit(&spec, &y, &config).unwrap());
}

#[test]
fn bad_start_and_unknown_fixed_rejected() {
    let spec = ModelSpec::new(Family::GaussianScale);
    let y = series(Family::GaussianScale, 100, 2);
    let config = FitConfig {
        start: Some(alloc::vec![0.0, 1.5, 0.01, 0.0]),
        ..FitConfig::default()
    };
    assert!(matches!(fit(&spec, &y, &config), Err(Error::InvalidParameter(_))));
    let config = FitConfig {
        fixed: Some(alloc::vec![(String::from("sigma"), 1.0)]),
        ..FitConfig::default()
    };
    assert!(matches!(fit(&spec, &y, &config), Err(Error::InvalidInput(_))));
    let (model, _) = Family::GaussianScale.reference_design();
    assert_eq!(model.state_dim(), 1);
}

#[test]
fn reference_values_rebuild_the_design() {
    for family in Family::ALL {
        let spec = ModelSpec::new(family);
        let values: Vec<f64> = spec.reference_values().into_iter().map(Option::unwrap).collect();
        let setup = spec.build(&values).unwrap();
        let (model, trans) = family.reference_design();
        assert_eq!(setup.model, model);
        assert!((setup.trans.q.clone() - trans.q.clone()).abs().max() < 1e-15);
        assert_eq!(setup.trans.t, trans.t);
        assert_eq!(setup.trans.c, trans.c);
    }
    let scaled = ModelSpec::new(Family::Poisson)
        .with_normalization(NormalizationKind::ScaledScore(ScoreScaling::ModelDefault));
    assert_eq!(scaled.reference_values()[2], None);
}
