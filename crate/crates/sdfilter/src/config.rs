//! JSON configuration schema. Every object rejects unknown keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdfilter_core::estimation::{FitConfig, ModelSpec, NormalizationKind};
use sdfilter_core::models::{Family, PoissonLink};
use sdfilter_core::uncertainty::{BandRegime, BandSpec, BandTarget};
use sdfilter_core::ScoreScaling;

use crate::error::{CliError, CliResult};
use crate::harness::ExperimentConfig;

/// Serializes [`Family`] by its name.
pub mod family_name {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &Family, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(f.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Family, D::Error> {
        let name = String::deserialize(d)?;
        name.parse().map_err(serde::de::Error::custom)
    }
}

/// Serializes a list of families by name.
pub mod family_names {
    use super::*;
    use serde::ser::SerializeSeq;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(fs: &[Family], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(fs.len()))?;
        for f in fs {
            seq.serialize_element(f.name())?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Family>, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        names
            .iter()
            .map(|n| n.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    KalmanConsistent,
    ScaledScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scaling {
    #[default]
    ModelDefault,
    InverseInformation { d: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Log,
    Identity,
}

impl From<Link> for PoissonLink {
    fn from(l: Link) -> Self {
        match l {
            Link::Log => PoissonLink::Log,
            Link::Identity => PoissonLink::Identity,
        }
    }
}

impl From<PoissonLink> for Link {
    fn from(l: PoissonLink) -> Self {
        match l {
            PoissonLink::Log => Link::Log,
            PoissonLink::Identity => Link::Identity,
        }
    }
}

/// Model family, normalization and (optionally) parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(with = "family_name")]
    pub family: Family,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub scaling: Scaling,
    #[serde(default)]
    pub poisson_link: Link,
    /// Natural-coordinate values overriding the reference design.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<BTreeMap<String, f64>>,
}

impl ModelConfig {
    pub fn new(family: Family) -> Self {
        ModelConfig {
            family,
            normalization: Normalization::default(),
            scaling: Scaling::default(),
            poisson_link: Link::default(),
            params: None,
        }
    }

    pub fn spec(&self) -> ModelSpec {
        let norm = match self.normalization {
            Normalization::KalmanConsistent => NormalizationKind::KalmanConsistent,
            Normalization::ScaledScore => NormalizationKind::ScaledScore(match self.scaling {
                Scaling::ModelDefault => ScoreScaling::ModelDefault,
                Scaling::InverseInformation { d } => ScoreScaling::InverseInformation { d },
            }),
        };
        ModelSpec::new(self.family)
            .with_normalization(norm)
            .with_poisson_link(self.poisson_link.into())
    }

    /// The same model under the Kalman-consistent normalization, which is
    /// what the simulator needs.
    pub fn data_generating(&self) -> ModelConfig {
        ModelConfig {
            normalization: Normalization::KalmanConsistent,
            ..self.clone()
        }
    }

    pub fn from_spec(spec: &ModelSpec) -> Self {
        let (normalization, scaling) = match spec.normalization {
            NormalizationKind::KalmanConsistent => (Normalization::KalmanConsistent, Scaling::ModelDefault),
            NormalizationKind::ScaledScore(ScoreScaling::ModelDefault) => {
                (Normalization::ScaledScore, Scaling::ModelDefault)
            }
            NormalizationKind::ScaledScore(ScoreScaling::InverseInformation { d }) => {
                (Normalization::ScaledScore, Scaling::InverseInformation { d })
            }
        };
        ModelConfig {
            family: spec.family,
            normalization,
            scaling,
            poisson_link: spec.poisson_link.into(),
            params: None,
        }
    }

    /// Parameter values in layout order: reference design values replaced
    /// by `params`.
    pub fn values(&self) -> CliResult<Vec<f64>> {
        let spec = self.spec();
        let names = spec.names();
        let overrides = self.params.clone().unwrap_or_default();
        check_names(&names, overrides.keys(), self.family)?;
        names
            .iter()
            .zip(spec.reference_values())
            .map(|(name, reference)| {
                overrides.get(name).copied().or(reference).ok_or_else(|| {
                    CliError::config(format!("parameter '{name}' has no default and must be given"))
                })
            })
            .collect()
    }
}

fn check_names<'a>(
    names: &[String],
    given: impl Iterator<Item = &'a String>,
    family: Family,
) -> CliResult<()> {
    for g in given {
        if !names.contains(g) {
            return Err(CliError::config(format!(
                "unknown parameter '{g}' for {family}; expected one of {names:?}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
}

fn default_starts() -> usize {
    5
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSettings {
    #[serde(default = "default_starts")]
    pub starts: usize,
    /// Parameters held at the given values; omitted means the family
    /// default.
    #[serde(default)]
    pub fixed: Option<BTreeMap<String, f64>>,
    /// First start point; parameters not listed use the data-driven default.
    #[serde(default)]
    pub start: Option<BTreeMap<String, f64>>,
    #[serde(default = "yes")]
    pub compute_covariance: bool,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            starts: default_starts(),
            fixed: None,
            start: None,
            compute_covariance: true,
        }
    }
}

impl FitSettings {
    pub fn fit_config(&self, spec: &ModelSpec, y: &[sdfilter_core::Vector], seed: u64) -> CliResult<FitConfig> {
        if self.starts == 0 {
            return Err(CliError::config("fit.starts must be at least 1"));
        }
        let names = spec.names();
        let start = match &self.start {
            Some(map) => {
                check_names(&names, map.keys(), spec.family)?;
                let mut v = spec.default_start(y);
                for (i, n) in names.iter().enumerate() {
                    if let Some(x) = map.get(n) {
                        v[i] = *x;
                    }
                }
                Some(v)
            }
            None => None,
        };
        let fixed = match &self.fixed {
            Some(map) => {
                check_names(&names, map.keys(), spec.family)?;
                Some(map.iter().map(|(k, v)| (k.clone(), *v)).collect())
            }
            None => None,
        };
        Ok(FitConfig {
            starts: self.starts,
            seed,
            start,
            fixed,
            compute_covariance: self.compute_covariance,
            ..FitConfig::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FilteringOnly,
    ParameterOnly,
    Combined,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::FilteringOnly => "filtering_only",
            Regime::ParameterOnly => "parameter_only",
            Regime::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    Predictive,
    Update,
    Smoothed,
}

fn default_draws() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSettings {
    pub level: f64,
    pub regime: Regime,
    #[serde(default)]
    pub target: Target,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub component: usize,
}

impl BandSettings {
    pub fn spec(&self, seed: u64) -> CliResult<BandSpec> {
        let regime = match self.regime {
            Regime::FilteringOnly => BandRegime::FilteringOnly,
            Regime::ParameterOnly => BandRegime::ParameterOnly,
            Regime::Combined => BandRegime::Combined,
        };
        let target = match self.target {
            Target::Predictive => BandTarget::Predictive,
            Target::Update => BandTarget::Update,
            Target::Smoothed => BandTarget::Smoothed,
        };
        let spec = BandSpec {
            level: self.level,
            regime,
            target,
            draws: self.draws,
            seed,
            component: self.component,
        };
        spec.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(spec)
    }
}

/// Top-level configuration shared by all subcommands; each command reads
/// the sections it needs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    /// Observation CSV, relative to the configuration file.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Fitted-parameter JSON written by `fit`, relative to the configuration
    /// file.
    #[serde(default)]
    pub fitted: Option<PathBuf>,
    #[serde(default)]
    pub fit: Option<FitSettings>,
    #[serde(default)]
    pub bands: Option<BandSettings>,
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn model(&self) -> CliResult<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::config("the 'model' section is required"))
    }
}
