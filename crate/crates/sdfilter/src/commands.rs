//! Subcommand implementations. Each command is a pure function of the
//! configuration, its input files and the seed.

use std::path::{Path, PathBuf};

use sdfilter_core::estimation::{fit, FitResult};
use sdfilter_core::models::simulate_ssm;
use sdfilter_core::score_engine::{sd_filter, sd_smoother, ObservationModel, SdOptions};
use sdfilter_core::uncertainty::bands;
use sdfilter_core::{stats, Vector};

use crate::config::{FitSettings, RunConfig};
use crate::error::{CliError, CliResult, Context};
use crate::harness::{run_experiment, write_report};
use crate::io::{component_names, read_json, read_observations, write_csv, write_json, Cell, FitFile};

pub const SIMULATE_FILE: &str = "simulate.csv";
pub const FIT_FILE: &str = "fit.json";
pub const FILTER_FILE: &str = "filter.csv";
pub const SMOOTH_FILE: &str = "smooth.csv";
pub const BANDS_FILE: &str = "bands.csv";

/// Everything a command needs: the parsed configuration, the directory
/// relative paths are resolved against, the output directory and the seed.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: RunConfig,
    pub base: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
}

impl Invocation {
    /// Loads `config_path`; `seed` overrides the configured seed, which
    /// defaults to 0.
    pub fn load(config_path: &Path, out: &Path, seed: Option<u64>) -> CliResult<Self> {
        let config = RunConfig::load(config_path)?;
        let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::new(config, base, out.to_path_buf(), seed))
    }

    pub fn new(config: RunConfig, base: PathBuf, out: PathBuf, seed: Option<u64>) -> Self {
        let seed = seed.or(config.seed).unwrap_or(0);
        Invocation {
            config,
            base,
            out,
            seed,
        }
    }

    fn prepare_out(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))
    }

    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// A configured path relative to the config file, or `default` in the
    /// output directory.
    fn input(&self, configured: &Option<PathBuf>, default: &str) -> PathBuf {
        match configured {
            Some(p) => self.base.join(p),
            None => self.output(default),
        }
    }

    fn observations(&self, obs_dim: usize) -> CliResult<Vec<Vector>> {
        read_observations(&self.input(&self.config.data, SIMULATE_FILE), obs_dim)
    }

    fn fitted(&self) -> CliResult<FitResult> {
        let path = self.input(&self.config.fitted, FIT_FILE);
        let file: FitFile = read_json(&path)?;
        file.to_result(&path)
    }
}

fn columns(parts: &[(&str, usize)]) -> Vec<String> {
    let mut header = vec![String::from("step")];
    for &(name, k) in parts {
        header.extend(component_names(name, k));
    }
    header
}

fn floats(xs: &Vector) -> Vec<Cell> {
    xs.iter().map(|&x| Cell::Float(x)).collect()
}

/// Writes `simulate.csv` with columns `step`, `state*`, `observation*` and
/// returns the printed summary.
pub fn cmd_simulate(inv: &Invocation) -> CliResult<String> {
    let model_cfg = inv.config.model()?.data_generating();
    let n = inv
        .config
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::config("the 'simulate' section is required"))?
        .n;
    if n == 0 {
        return Err(CliError::config("simulate.n must be at least 1"));
    }
    let values = model_cfg.values()?;
    let setup = model_cfg.spec().build(&values).context("models")?;
    let sample = simulate_ssm(&setup.model, &setup.trans, n, inv.seed).context("models")?;
    let m = setup.trans.dim();
    let p = setup.model.obs_dim();
    let counts = model_cfg.family == sdfilter_core::models::Family::Poisson;
    inv.prepare_out()?;
    let rows = sample.states.iter().zip(&sample.observations).enumerate().map(|(t, (a, y))| {
        let mut row = vec![Cell::Index(t + 1)];
        row.extend(floats(a));
        row.extend(y.iter().map(|&v| if counts { Cell::Count(v) } else { Cell::Float(v) }));
        row
    });
    write_csv(
        &inv.output(SIMULATE_FILE),
        &columns(&[("state", m), ("observation", p)]),
        rows,
    )?;
    let first: Vec<f64> = sample.observations.iter().map(|y| y[0]).collect();
    let min = first.iter().copied().fold(f64::INFINITY, f64::min);
    let max = first.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let var = if n > 1 { stats::variance(&first) } else { 0.0 };
    Ok(format!(
        "simulated {n} steps of {} (seed {}): observation mean {:.6}, variance {:.6}, min {:.6}, max {:.6}",
        model_cfg.family,
        inv.seed,
        stats::mean(&first),
        var,
        min,
        max
    ))
}

/// Fits the configured model to the data and writes `fit.json`.
pub fn cmd_fit(inv: &Invocation) -> CliResult<String> {
    let model_cfg = inv.config.model()?;
    let spec = model_cfg.spec();
    let obs_dim = spec.build(&model_cfg.data_generating().values()?).context("models")?.model.obs_dim();
    let y = inv.observations(obs_dim)?;
    let settings = inv.config.fit.clone().unwrap_or_default();
    let result = run_fit(&spec, &y, &settings, inv.seed)?;
    inv.prepare_out()?;
    write_json(&inv.output(FIT_FILE), &FitFile::from_result(&result))?;
    let estimates: Vec<String> = result
        .params
        .names
        .iter()
        .zip(&result.params.values)
        .zip(&result.std_errors)
        .map(|((n, v), s)| format!("{n} = {v:.6} ({s:.6})"))
        .collect();
    Ok(format!(
        "log-likelihood {:.6} over {} observations; {}",
        result.loglik,
        result.n_obs,
        estimates.join(", ")
    ))
}

pub fn run_fit(
    spec: &sdfilter_core::estimation::ModelSpec,
    y: &[Vector],
    settings: &FitSettings,
    seed: u64,
) -> CliResult<FitResult> {
    let cfg = settings.fit_config(spec, y, seed)?;
    fit(spec, y, &cfg).context("estimation")
}

/// Runs the score-driven filter at the fitted parameters and writes
/// `filter.csv`: predictive and update means and variances (diagonal) and
/// the signal at the predictive mean.
pub fn cmd_filter(inv: &Invocation) -> CliResult<String> {
    let fitted = inv.fitted()?;
    let setup = fitted.setup().context("estimation")?;
    let y = inv.observations(setup.model.obs_dim())?;
    let run = sd_filter(&setup.model, &setup.trans, &setup.norm, &y, &setup.init, &SdOptions::default())
        .context("score_engine")?;
    let m = setup.trans.dim();
    let k = setup.model.signal(run.steps[0].pred.a.as_slice()).len();
    inv.prepare_out()?;
    let rows = run.steps.iter().enumerate().map(|(t, s)| {
        let mut row = vec![Cell::Index(t + 1)];
        row.extend(floats(&s.pred.a));
        row.extend(floats(&s.pred.p.diagonal()));
        row.extend(floats(&s.upd.a));
        row.extend(floats(&s.upd.p.diagonal()));
        row.extend(floats(&setup.model.signal(s.pred.a.as_slice())));
        row
    });
    write_csv(
        &inv.output(FILTER_FILE),
        &columns(&[
            ("pred_mean", m),
            ("pred_var", m),
            ("upd_mean", m),
            ("upd_var", m),
            ("signal", k),
        ]),
        rows,
    )?;
    Ok(format!(
        "filtered {} steps; {} covariance repairs; log-likelihood {:.6}",
        run.len(),
        run.repairs,
        run.loglik()
    ))
}

/// Runs filter and smoother at the fitted parameters and writes
/// `smooth.csv`: smoothed means, variances (diagonal) and signal.
pub fn cmd_smooth(inv: &Invocation) -> CliResult<String> {
    let fitted = inv.fitted()?;
    let setup = fitted.setup().context("estimation")?;
    let y = inv.observations(setup.model.obs_dim())?;
    let run = sd_filter(&setup.model, &setup.trans, &setup.norm, &y, &setup.init, &SdOptions::default())
        .context("score_engine")?;
    let smooth = sd_smoother(&setup.model, &setup.trans, &run).context("score_engine")?;
    let m = setup.trans.dim();
    let k = setup.model.signal(smooth.steps[0].mean.as_slice()).len();
    inv.prepare_out()?;
    let rows = smooth.steps.iter().enumerate().map(|(t, s)| {
        let mut row = vec![Cell::Index(t + 1)];
        row.extend(floats(&s.mean));
        row.extend(floats(&s.cov.diagonal()));
        row.extend(floats(&setup.model.signal(s.mean.as_slice())));
        row
    });
    write_csv(
        &inv.output(SMOOTH_FILE),
        &columns(&[("mean", m), ("var", m), ("signal", k)]),
        rows,
    )?;
    Ok(format!("smoothed {} steps; {} covariance repairs", smooth.len(), smooth.psd_repairs))
}

/// Computes bands at the fitted parameters and writes `bands.csv`.
pub fn cmd_bands(inv: &Invocation) -> CliResult<String> {
    let settings = inv
        .config
        .bands
        .as_ref()
        .ok_or_else(|| CliError::config("the 'bands' section is required"))?;
    let spec = settings.spec(inv.seed)?;
    let fitted = inv.fitted()?;
    let obs_dim = fitted.setup().context("estimation")?.model.obs_dim();
    let y = inv.observations(obs_dim)?;
    let series = bands(&fitted, &y, &spec).context("uncertainty")?;
    inv.prepare_out()?;
    let header: Vec<String> = ["step", "mean", "lower", "upper", "var_total", "var_filtering", "var_parameter"]
        .into_iter()
        .map(String::from)
        .collect();
    let rows = (0..series.len()).map(|t| {
        vec![
            Cell::Index(t + 1),
            Cell::Float(series.mean[t]),
            Cell::Float(series.lower[t]),
            Cell::Float(series.upper[t]),
            Cell::Float(series.var_total[t]),
            Cell::Float(series.var_filtering[t]),
            Cell::Float(series.var_parameter[t]),
        ]
    });
    write_csv(&inv.output(BANDS_FILE), &header, rows)?;
    let mean_width = (0..series.len()).map(|t| series.width(t)).sum::<f64>() / series.len() as f64;
    Ok(format!("{} bands at level {} over {} steps; mean width {mean_width:.6}", settings.regime.name(), spec.level, series.len()))
}

/// Runs the Monte Carlo experiment and writes the report and tables.
pub fn cmd_experiment(inv: &Invocation) -> CliResult<String> {
    let cfg = inv
        .config
        .experiment
        .as_ref()
        .ok_or_else(|| CliError::config("the 'experiment' section is required"))?;
    let report = run_experiment(cfg, inv.seed)?;
    inv.prepare_out()?;
    write_report(&inv.out, &report)?;
    let mut lines = Vec::new();
    for m in &report.models {
        let ratios: Vec<String> = m.mse.iter().map(|r| format!("{} {:.4}", r.estimate, r.ratio)).collect();
        lines.push(format!(
            "{}: {} replications, MSE ratio SD/oracle: {}",
            m.family,
            m.completed,
            ratios.join(", ")
        ));
    }
    Ok(lines.join("\n"))
}
