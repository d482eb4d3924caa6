//! Monte Carlo experiment: simulate, fit on the first half, then compare the
//! score-driven predictive, update and smoothed estimates with a particle
//! filter/smoother reference on the second half, and measure the coverage
//! of confidence bands.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sdfilter_core::estimation::{fit, FitResult, ModelSpec};
use sdfilter_core::models::{simulate_ssm, AnyModel, Family, SsmSample};
use sdfilter_core::particle::{particle_filter, particle_smoother, PfOptions, MIN_PARTICLES};
use sdfilter_core::rng::derive_seed;
use sdfilter_core::score_engine::{sd_filter, sd_smoother, SdOptions, TransitionSpec};
use sdfilter_core::stats;
use sdfilter_core::uncertainty::{
    aggregate_draws, bands_filtering_only, coverage_rate, draw_moments, filter_moments, BandRegime, BandSpec,
    BandTarget, MIN_DRAWS,
};

use crate::config::{family_name, family_names, FitSettings, Link, ModelConfig, Normalization};
use crate::error::{CliError, CliResult, Context};
use crate::io::{write_json, Cell};

/// Label written into every report.
pub const ORACLE_LABEL: &str =
    "bootstrap particle filter with backward-simulation smoother (not importance sampling)";

/// The three state estimates compared by the experiment.
pub const ESTIMATES: [&str; 3] = ["predictive", "update", "smoothed"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleParameters {
    /// The score-driven estimates, so both methods share one parameter
    /// vector and differ only in the filtering algorithm.
    #[default]
    Fitted,
    /// The data-generating parameters.
    True,
}

fn default_families() -> Vec<Family> {
    vec![
        Family::StudentTLocation,
        Family::GaussianScale,
        Family::StudentTScale,
        Family::Poisson,
    ]
}

fn default_replications() -> usize {
    100
}

fn default_n() -> usize {
    2000
}

fn default_particles() -> usize {
    1000
}

fn default_trajectories() -> usize {
    200
}

fn default_levels() -> Vec<f64> {
    vec![0.90, 0.95, 0.99]
}

fn default_band_draws() -> usize {
    200
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(with = "family_names", default = "default_families")]
    pub families: Vec<Family>,
    /// Parameter overrides per family name, in natural coordinates.
    #[serde(default)]
    pub params: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Series length; the first half is used for fitting.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_particles")]
    pub particles: usize,
    /// Backward trajectories of the particle smoother.
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default)]
    pub oracle_parameters: OracleParameters,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub poisson_link: Link,
    #[serde(default)]
    pub fit: FitSettings,
    #[serde(default = "yes")]
    pub coverage: bool,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default = "default_band_draws")]
    pub band_draws: usize,
    /// Wall-clock totals make the report machine-dependent, so they are
    /// off by default.
    #[serde(default)]
    pub record_timing: bool,
    /// Keep per-replication losses in the report.
    #[serde(default)]
    pub raw_losses: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        let fail = |m: String| Err(CliError::config(m));
        if self.families.is_empty() {
            return fail("experiment.families is empty".into());
        }
        if self.replications == 0 {
            return fail("experiment.replications must be at least 1".into());
        }
        if self.n % 2 != 0 || self.n < 100 {
            return fail(format!("experiment.n must be even and at least 100, got {}", self.n));
        }
        if self.particles < MIN_PARTICLES {
            return fail(format!("experiment.particles must be at least {MIN_PARTICLES}"));
        }
        if self.trajectories == 0 {
            return fail("experiment.trajectories must be at least 1".into());
        }
        if self.coverage {
            if self.band_draws < MIN_DRAWS {
                return fail(format!("experiment.band_draws must be at least {MIN_DRAWS}"));
            }
            if let Some(l) = self.levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
                return fail(format!("band level {l} is not in (0, 1)"));
            }
        }
        if self.oracle_parameters == OracleParameters::Fitted && self.normalization != Normalization::KalmanConsistent {
            return fail("an oracle at the fitted parameters needs the kalman_consistent normalization".into());
        }
        for name in self.params.keys() {
            let family: Family = name.parse().map_err(|e: sdfilter_core::Error| CliError::config(e.to_string()))?;
            if !self.families.contains(&family) {
                return fail(format!("parameters given for {family}, which is not in the experiment"));
            }
        }
        for &family in &self.families {
            self.dgp_config(family).values()?;
        }
        Ok(())
    }

    fn dgp_config(&self, family: Family) -> ModelConfig {
        ModelConfig {
            poisson_link: self.poisson_link,
            params: self.params.get(family.name()).cloned(),
            ..ModelConfig::new(family)
        }
    }

    fn fit_spec(&self, family: Family) -> ModelSpec {
        ModelConfig {
            normalization: self.normalization,
            ..self.dgp_config(family)
        }
        .spec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub estimate: String,
    pub sd: f64,
    pub oracle: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub level: f64,
    pub filtering: f64,
    pub parameter: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub true_value: f64,
    pub mean: f64,
    pub std_dev: f64,
    pub mc_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub sd_seconds: f64,
    pub oracle_seconds: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub replication: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawReplication {
    pub replication: usize,
    pub seed: u64,
    /// SD then oracle losses, in [`ESTIMATES`] order.
    pub sd_mse: [f64; 3],
    pub oracle_mse: [f64; 3],
    /// Per level: filtering, parameter, combined coverage.
    pub coverage: Vec<[f64; 3]>,
    pub estimates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    #[serde(with = "family_name")]
    pub family: Family,
    pub completed: usize,
    pub failures: Vec<Failure>,
    pub mse: Vec<MseRow>,
    pub coverage: Vec<CoverageRow>,
    pub parameters: Vec<ParameterSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<Vec<RawReplication>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub oracle: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub models: Vec<ModelReport>,
}

struct Replication {
    raw: RawReplication,
    sd_seconds: f64,
    oracle_seconds: f64,
}

/// Mean squared error over steps, averaged over state components.
fn mse(est: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (e, t) in est.iter().zip(truth) {
        for (a, b) in e.iter().zip(t) {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    sum / count as f64
}

fn run_replication(
    cfg: &ExperimentConfig,
    family: Family,
    dgp: &(AnyModel, TransitionSpec),
    seed: u64,
) -> Result<Replication, String> {
    let err = |stage: &str, e: sdfilter_core::Error| format!("{stage}: {e}");
    let n = cfg.n;
    let h = n / 2;
    let (model, trans) = dgp;
    let sample: SsmSample = simulate_ssm(model, trans, n, derive_seed(seed, 0)).map_err(|e| err("simulate", e))?;
    let y = &sample.observations;
    let truth: Vec<Vec<f64>> = sample.states[h..].iter().map(|s| s.iter().copied().collect()).collect();

    let started = Instant::now();
    let spec = cfg.fit_spec(family);
    let mut fit_cfg = cfg
        .fit
        .fit_config(&spec, &y[..h], derive_seed(seed, 1))
        .map_err(|e| e.to_string())?;
    fit_cfg.compute_covariance = cfg.coverage;
    let fitted: FitResult = fit(&spec, &y[..h], &fit_cfg).map_err(|e| err("fit", e))?;
    let setup = fitted.setup().map_err(|e| err("fit", e))?;
    let opts = SdOptions::default();
    let run = sd_filter(&setup.model, &setup.trans, &setup.norm, y, &setup.init, &opts).map_err(|e| err("filter", e))?;
    let smooth = sd_smoother(&setup.model, &setup.trans, &run).map_err(|e| err("smoother", e))?;
    let sd_seconds = started.elapsed().as_secs_f64();

    let window = |f: &dyn Fn(usize) -> Vec<f64>| (h..n).map(f).collect::<Vec<_>>();
    let sd_mse = [
        mse(&window(&|t| run.steps[t].pred.a.iter().copied().collect()), &truth),
        mse(&window(&|t| run.steps[t].upd.a.iter().copied().collect()), &truth),
        mse(&window(&|t| smooth.steps[t].mean.iter().copied().collect()), &truth),
    ];

    let started = Instant::now();
    let (oracle_model, oracle_trans) = match cfg.oracle_parameters {
        OracleParameters::True => (model.clone(), trans.clone()),
        OracleParameters::Fitted => (setup.model.clone(), setup.trans.clone()),
    };
    let init = oracle_trans.stationary_state().map_err(|e| err("oracle", e))?;
    let mut pf_opts = PfOptions::new(cfg.particles, derive_seed(seed, 2));
    pf_opts.store_from = Some(h);
    let pf = particle_filter(&oracle_model, &oracle_trans, y, &init, &pf_opts).map_err(|e| err("particle filter", e))?;
    let ps = particle_smoother(&pf, &oracle_trans, cfg.trajectories, derive_seed(seed, 3))
        .map_err(|e| err("particle smoother", e))?;
    let oracle_seconds = started.elapsed().as_secs_f64();
    let oracle_mse = [
        mse(&window(&|t| pf.steps[t].pred_mean.iter().copied().collect()), &truth),
        mse(&window(&|t| pf.steps[t].mean.iter().copied().collect()), &truth),
        mse(
            &ps.mean.iter().map(|v| v.iter().copied().collect()).collect::<Vec<_>>(),
            &truth,
        ),
    ];

    let coverage = if cfg.coverage {
        band_coverage(cfg, &fitted, y, &run, &truth, derive_seed(seed, 4))?
    } else {
        Vec::new()
    };
    Ok(Replication {
        raw: RawReplication {
            replication: 0,
            seed,
            sd_mse,
            oracle_mse,
            coverage,
            estimates: fitted.params.values.clone(),
        },
        sd_seconds,
        oracle_seconds,
    })
}

/// Coverage of predictive bands for state component 0 on the evaluation
/// half, per level and regime.
fn band_coverage(
    cfg: &ExperimentConfig,
    fitted: &FitResult,
    y: &[sdfilter_core::Vector],
    run: &sdfilter_core::SdFilterRun,
    truth: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<[f64; 3]>, String> {
    let err = |e: sdfilter_core::Error| format!("bands: {e}");
    let h = cfg.n / 2;
    let plug_in = filter_moments(run, BandTarget::Predictive, 0).map_err(err)?;
    let draws = draw_moments(fitted, y, BandTarget::Predictive, 0, cfg.band_draws, seed).map_err(err)?;
    let truth0: Vec<f64> = truth.iter().map(|t| t[0]).collect();
    let mut out = Vec::with_capacity(cfg.levels.len());
    for &level in &cfg.levels {
        let spec = |regime| BandSpec {
            level,
            regime,
            target: BandTarget::Predictive,
            draws: cfg.band_draws,
            seed,
            component: 0,
        };
        let filt = bands_filtering_only(&plug_in, &spec(BandRegime::FilteringOnly)).map_err(err)?;
        let par = aggregate_draws(&plug_in, &draws, &spec(BandRegime::ParameterOnly)).map_err(err)?;
        let comb = aggregate_draws(&plug_in, &draws, &spec(BandRegime::Combined)).map_err(err)?;
        let cov = |b: &sdfilter_core::uncertainty::BandSeries| coverage_rate(&b.slice(h, cfg.n), &truth0).map_err(err);
        out.push([cov(&filt)?, cov(&par)?, cov(&comb)?]);
    }
    Ok(out)
}

fn summarize(
    cfg: &ExperimentConfig,
    family: Family,
    truth: &[f64],
    names: &[String],
    results: Vec<(usize, u64, Result<Replication, String>)>,
) -> ModelReport {
    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (r, seed, res) in results {
        match res {
            Ok(mut rep) => {
                rep.raw.replication = r;
                ok.push(rep);
            }
            Err(error) => {
                log::warn!("{family} replication {r} failed: {error}");
                failures.push(Failure {
                    replication: r,
                    seed,
                    error,
                });
            }
        }
    }
    let mean_of = |f: &dyn Fn(&Replication) -> f64| stats::mean(&ok.iter().map(f).collect::<Vec<_>>());
    let mse = (0..3)
        .map(|k| {
            let sd = mean_of(&|r| r.raw.sd_mse[k]);
            let oracle = mean_of(&|r| r.raw.oracle_mse[k]);
            MseRow {
                estimate: ESTIMATES[k].to_string(),
                sd,
                oracle,
                ratio: sd / oracle,
            }
        })
        .collect();
    let coverage = if cfg.coverage {
        cfg.levels
            .iter()
            .enumerate()
            .map(|(i, &level)| CoverageRow {
                level,
                filtering: mean_of(&|r| r.raw.coverage[i][0]),
                parameter: mean_of(&|r| r.raw.coverage[i][1]),
                combined: mean_of(&|r| r.raw.coverage[i][2]),
            })
            .collect()
    } else {
        Vec::new()
    };
    let parameters = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let xs: Vec<f64> = ok.iter().map(|r| r.raw.estimates[i]).collect();
            let std_dev = if xs.len() > 1 { stats::variance(&xs).sqrt() } else { 0.0 };
            ParameterSummary {
                name: name.clone(),
                true_value: truth[i],
                mean: stats::mean(&xs),
                std_dev,
                mc_std_error: std_dev / (xs.len() as f64).sqrt(),
            }
        })
        .collect();
    let timing = cfg.record_timing.then(|| {
        let sd_seconds: f64 = ok.iter().map(|r| r.sd_seconds).sum();
        let oracle_seconds: f64 = ok.iter().map(|r| r.oracle_seconds).sum();
        Timing {
            sd_seconds,
            oracle_seconds,
            ratio: oracle_seconds / sd_seconds,
        }
    });
    let completed = ok.len();
    let raw = cfg.raw_losses.then(|| ok.into_iter().map(|r| r.raw).collect());
    ModelReport {
        family,
        completed,
        failures,
        mse,
        coverage,
        parameters,
        timing,
        raw,
    }
}

/// Runs every replication of every family. Replications run in parallel on
/// the current rayon pool; results are aggregated in replication order, so
/// the report depends only on the configuration and the seed.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> CliResult<ExperimentReport> {
    cfg.validate()?;
    let mut designs = Vec::new();
    for &family in &cfg.families {
        let dgp_cfg = cfg.dgp_config(family);
        let values = dgp_cfg.values()?;
        let dgp = dgp_cfg.spec().build(&values).context("experiment design")?;
        designs.push((family, values, (dgp.model, dgp.trans)));
    }
    let jobs: Vec<(usize, usize, u64)> = designs
        .iter()
        .enumerate()
        .flat_map(|(d, (family, _, _))| {
            let family_index = Family::ALL.iter().position(|f| f == family).unwrap_or(0) as u64;
            let family_seed = derive_seed(seed, family_index);
            (0..cfg.replications).map(move |r| (d, r, derive_seed(family_seed, r as u64)))
        })
        .collect();
    let results: Vec<(usize, usize, u64, Result<Replication, String>)> = jobs
        .into_par_iter()
        .map(|(d, r, s)| {
            let (family, _, dgp) = &designs[d];
            (d, r, s, run_replication(cfg, *family, dgp, s))
        })
        .collect();
    let mut per_design: Vec<Vec<(usize, u64, Result<Replication, String>)>> =
        designs.iter().map(|_| Vec::new()).collect();
    for (d, r, s, res) in results {
        per_design[d].push((r, s, res));
    }
    let mut models = Vec::new();
    for ((family, values, _), results) in designs.iter().zip(per_design) {
        let names = ModelSpec::new(*family).names();
        let fit_names = cfg.fit_spec(*family).names();
        // true values aligned with the fitted layout; the loading of the
        // scaled-score scheme has no true value
        let truth: Vec<f64> = fit_names
            .iter()
            .map(|n| names.iter().position(|x| x == n).map_or(f64::NAN, |i| values[i]))
            .collect();
        let report = summarize(cfg, *family, &truth, &fit_names, results);
        let failed = report.failures.len();
        if failed * 10 > cfg.replications {
            let detail: Vec<String> = report
                .failures
                .iter()
                .take(5)
                .map(|f| format!("replication {}: {}", f.replication, f.error))
                .collect();
            return Err(CliError::Experiment(format!(
                "{family}: {failed} of {} replications failed; first failures: {}",
                cfg.replications,
                detail.join("; ")
            )));
        }
        models.push(report);
    }
    Ok(ExperimentReport {
        oracle: ORACLE_LABEL.to_string(),
        seed,
        config: cfg.clone(),
        models,
    })
}

/// Writes `experiment_report.json`, `table_mse.csv` and
/// `table_coverage.csv` (and `raw_losses.csv` when kept) into `dir`.
pub fn write_report(dir: &std::path::Path, report: &ExperimentReport) -> CliResult<()> {
    write_json(&dir.join("experiment_report.json"), report)?;
    let s = |x: &str| x.to_string();
    let header = [s("model"), s("estimate"), s("mse_sd"), s("mse_oracle"), s("ratio")];
    let rows: Vec<(String, Vec<Cell>)> = report
        .models
        .iter()
        .flat_map(|m| {
            m.mse
                .iter()
                .map(move |r| (m.family.name().to_string(), r))
                .map(|(f, r)| {
                    (
                        format!("{f},{}", r.estimate),
                        vec![Cell::Float(r.sd), Cell::Float(r.oracle), Cell::Float(r.ratio)],
                    )
                })
        })
        .collect();
    write_labelled(&dir.join("table_mse.csv"), &header, rows)?;
    let header = [s("model"), s("level"), s("filtering"), s("parameter"), s("combined")];
    let rows: Vec<(String, Vec<Cell>)> = report
        .models
        .iter()
        .flat_map(|m| {
            m.coverage.iter().map(move |c| {
                (
                    m.family.name().to_string(),
                    vec![
                        Cell::Float(c.level),
                        Cell::Float(c.filtering),
                        Cell::Float(c.parameter),
                        Cell::Float(c.combined),
                    ],
                )
            })
        })
        .collect();
    write_labelled(&dir.join("table_coverage.csv"), &header, rows)?;
    if report.config.raw_losses {
        let header: Vec<String> = ["model", "replication", "seed"]
            .into_iter()
            .map(String::from)
            .chain(ESTIMATES.iter().map(|e| format!("sd_{e}")))
            .chain(ESTIMATES.iter().map(|e| format!("oracle_{e}")))
            .collect();
        let rows: Vec<(String, Vec<Cell>)> = report
            .models
            .iter()
            .flat_map(|m| {
                m.raw.iter().flatten().map(move |r| {
                    let mut cells = vec![Cell::Index(r.replication), Cell::Index(r.seed as usize)];
                    cells.extend(r.sd_mse.iter().chain(&r.oracle_mse).map(|&x| Cell::Float(x)));
                    (m.family.name().to_string(), cells)
                })
            })
            .collect();
        write_labelled(&dir.join("raw_losses.csv"), &header, rows)?;
    }
    Ok(())
}

/// Rows whose leading text columns are pre-joined with commas.
fn write_labelled(path: &std::path::Path, header: &[String], rows: Vec<(String, Vec<Cell>)>) -> CliResult<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| CliError::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (label, cells) in rows {
        let rest: Vec<String> = cells.iter().map(Cell::render).collect();
        writeln!(w, "{label},{}", rest.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}
