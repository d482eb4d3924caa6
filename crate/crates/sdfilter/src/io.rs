//! File formats: CSV series with a header row and JSON documents.
//!
//! Floats are written in scientific notation with 17 significant digits,
//! which round-trips every `f64`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sdfilter_core::error::StartDiagnostics;
use sdfilter_core::estimation::FitResult;
use sdfilter_core::{Matrix, Vector};

use crate::config::ModelConfig;
use crate::error::{CliError, CliResult};

/// One CSV cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Index(usize),
    Float(f64),
    /// A count stored as `f64`, written without a fractional part.
    Count(f64),
}

impl Cell {
    pub fn render(&self) -> String {
        match *self {
            Cell::Index(i) => i.to_string(),
            Cell::Float(x) => format_float(x),
            Cell::Count(x) => format!("{x:.0}"),
        }
    }
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a CSV file with the given header.
pub fn write_csv<I>(path: &Path, header: &[String], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = Vec<Cell>>,
{
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::input(path, format!("{other:?}")),
    };
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.iter().map(Cell::render)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a numeric column set from a CSV file with a header row.
pub fn read_columns(path: &Path, names: &[String]) -> CliResult<Vec<Vec<f64>>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| CliError::input(path, e))?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h.trim() == n)
                .ok_or_else(|| CliError::input(path, format!("missing column '{n}'")))
        })
        .collect::<CliResult<_>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::input(path, e))?;
        for (c, &i) in idx.iter().enumerate() {
            let field = rec.get(i).unwrap_or("").trim();
            let v: f64 = field.parse().map_err(|_| {
                CliError::input(path, format!("row {}: '{field}' is not a number", line + 1))
            })?;
            cols[c].push(v);
        }
    }
    Ok(cols)
}

/// Column names for an indexed quantity: `base` for one component,
/// `base_1..base_k` otherwise.
pub fn component_names(base: &str, k: usize) -> Vec<String> {
    if k == 1 {
        vec![base.to_string()]
    } else {
        (1..=k).map(|i| format!("{base}_{i}")).collect()
    }
}

/// Observations from the `observation` column(s).
pub fn read_observations(path: &Path, obs_dim: usize) -> CliResult<Vec<Vector>> {
    let cols = read_columns(path, &component_names("observation", obs_dim))?;
    let n = cols[0].len();
    if n == 0 {
        return Err(CliError::input(path, "no observations"));
    }
    Ok((0..n)
        .map(|t| Vector::from_iterator(obs_dim, cols.iter().map(|c| c[t])))
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRecord {
    pub start: usize,
    pub iterations: usize,
    pub objective: Option<f64>,
    pub gradient_norm: Option<f64>,
    pub converged: bool,
    pub message: String,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Serialized [`FitResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub model: ModelConfig,
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub fixed: Vec<String>,
    pub loglik: f64,
    pub n_obs: usize,
    pub best_start: usize,
    pub diagnostics: Vec<StartRecord>,
}

impl FitFile {
    pub fn from_result(fit: &FitResult) -> Self {
        let k = fit.params.len();
        FitFile {
            model: ModelConfig::from_spec(&fit.spec),
            names: fit.params.names.clone(),
            estimates: fit.params.values.clone(),
            std_errors: fit.std_errors.clone(),
            covariance: (0..k).map(|i| (0..k).map(|j| fit.covariance[(i, j)]).collect()).collect(),
            fixed: fit.fixed.clone(),
            loglik: fit.loglik,
            n_obs: fit.n_obs,
            best_start: fit.best_start,
            diagnostics: fit
                .diagnostics
                .iter()
                .map(|d| StartRecord {
                    start: d.start,
                    iterations: d.iterations,
                    objective: finite(d.objective),
                    gradient_norm: finite(d.gradient_norm),
                    converged: d.converged,
                    message: d.message.clone(),
                })
                .collect(),
        }
    }

    pub fn to_result(&self, path: &Path) -> CliResult<FitResult> {
        let spec = self.model.spec();
        let k = self.estimates.len();
        if spec.names() != self.names {
            return Err(CliError::input(
                path,
                format!("parameter names {:?} do not match {}", self.names, spec.family),
            ));
        }
        if self.std_errors.len() != k || self.covariance.len() != k || self.covariance.iter().any(|r| r.len() != k)
        {
            return Err(CliError::input(path, "estimates, standard errors and covariance differ in size"));
        }
        let params = spec.parameters(&self.estimates).map_err(|e| CliError::input(path, e))?;
        if !params.in_domain() {
            return Err(CliError::input(path, "estimates are outside the parameter domain"));
        }
        Ok(FitResult {
            spec,
            params,
            fixed: self.fixed.clone(),
            loglik: self.loglik,
            covariance: Matrix::from_fn(k, k, |i, j| self.covariance[i][j]),
            std_errors: self.std_errors.clone(),
            diagnostics: self
                .diagnostics
                .iter()
                .map(|d| StartDiagnostics {
                    start: d.start,
                    iterations: d.iterations,
                    objective: d.objective.unwrap_or(f64::INFINITY),
                    gradient_norm: d.gradient_norm.unwrap_or(f64::NAN),
                    converged: d.converged,
                    message: d.message.clone(),
                })
                .collect(),
            best_start: self.best_start,
            n_obs: self.n_obs,
        })
    }
}
