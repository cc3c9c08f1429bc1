//! Experiment configuration files (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::Formulation;
use crate::channel::{LinkState, NetworkGeometry};
use crate::data::Heterogeneity;
use crate::learn::{Algorithm, Schedule, TrainingPlan};
use crate::prior::PriorEncoding;
use crate::theory::GenieMethod;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seeds: SeedSpec,
    #[serde(default)]
    pub output: OutputSpec,
    pub dataset: DatasetSpec,
    pub network: NetworkSpec,
    pub training: TrainingSpec,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub threshold: Option<ThresholdSpec>,
}

/// Seeds as an explicit list or `count` seeds starting at `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List(Vec<u64>),
    Range(SeedRange),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub count: u64,
    #[serde(default)]
    pub start: u64,
}

impl Default for SeedSpec {
    fn default() -> Self {
        SeedSpec::Range(SeedRange { count: 30, start: 0 })
    }
}

impl SeedSpec {
    pub fn seeds(&self) -> Vec<u64> {
        match self {
            SeedSpec::List(v) => v.clone(),
            SeedSpec::Range(SeedRange { count, start }) => (*start..start + count).collect(),
        }
    }
}

impl std::str::FromStr for SeedSpec {
    type Err = Error;

    /// `30`, `5..10` or `1,4,9`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config { key: "seeds".into(), message: format!("cannot parse `{s}`") };
        if let Some((a, b)) = s.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            if b <= a {
                return Err(bad());
            }
            return Ok(SeedSpec::Range(SeedRange { count: b - a, start: a }));
        }
        if s.contains(',') {
            return s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>().map(SeedSpec::List);
        }
        let count: u64 = s.trim().parse().map_err(|_| bad())?;
        Ok(SeedSpec::Range(SeedRange { count, start: 0 }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    /// Write one JSONL trace per run.
    #[serde(default = "yes")]
    pub traces: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: default_out(), traces: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "default_devices")]
    pub devices: usize,
    #[serde(default = "default_samples")]
    pub samples_per_device: usize,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub heterogeneity: Heterogeneity,
}

fn default_devices() -> usize {
    20
}
fn default_samples() -> usize {
    100
}
fn default_dimension() -> usize {
    300
}

/// How the fading gain behaves over rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fading {
    /// `h ~ N(0, 1)` redrawn every round.
    #[default]
    Block,
    /// `h ~ N(0, 1)` drawn once per seed and device.
    Fixed,
    /// `h = 1` always.
    Unit,
}

/// Per-device noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkSpec {
    /// Devices dropped uniformly in a cell; path loss sets `sigma2`.
    Geometry {
        #[serde(default)]
        geometry: NetworkGeometry,
        #[serde(default)]
        fading: Fading,
    },
    /// `sigma2` log-spaced from `min_sigma2` (device 0) to `max_sigma2`.
    LogSpaced {
        min_sigma2: f64,
        max_sigma2: f64,
        #[serde(default)]
        fading: Fading,
    },
    /// One `sigma2` per device, optionally with fixed gains.
    Explicit {
        sigma2: Vec<f64>,
        #[serde(default)]
        h: Option<Vec<f64>>,
        #[serde(default)]
        fading: Fading,
    },
}

impl NetworkSpec {
    pub fn fading(&self) -> Fading {
        match self {
            NetworkSpec::Geometry { fading, .. }
            | NetworkSpec::LogSpaced { fading, .. }
            | NetworkSpec::Explicit { fading, .. } => *fading,
        }
    }
}

/// Base step size: a number, or a multiple of `1/L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSpec {
    Value { gamma: f64 },
    InverseSmoothness {
        #[serde(default = "one")]
        multiple: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl StepSpec {
    pub fn resolve(self, smoothness: f64) -> f64 {
        match self {
            StepSpec::Value { gamma } => gamma,
            StepSpec::InverseSmoothness { multiple } => multiple / smoothness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    /// Algorithms run side by side on identical data and channels.
    pub algorithms: Vec<Algorithm>,
    pub step: StepSpec,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub downlink_compression: bool,
    pub rounds: usize,
    #[serde(default)]
    pub prior_encoding: PriorEncoding,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub formulation: Formulation,
    /// Standard deviation of the initial model entries; zero starts at the origin.
    #[serde(default)]
    pub init_std: f64,
}

impl TrainingSpec {
    pub fn plan(&self, algorithm: Algorithm, gamma: f64) -> TrainingPlan {
        TrainingPlan {
            algorithm,
            gamma,
            delta: self.delta,
            schedule: self.schedule,
            downlink_compression: self.downlink_compression,
            rounds: self.rounds,
            prior_encoding: self.prior_encoding,
            batch_size: self.batch_size,
            formulation: self.formulation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub gammas: Vec<f64>,
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub algorithms: Option<Vec<Algorithm>>,
}

/// What "reaching the level" means for rounds-to-threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMetric {
    /// The global loss itself.
    Loss,
    /// Loss divided by the total number of samples.
    #[default]
    PerSampleLoss,
    /// `(F - F*) / (F(w0) - F*)`.
    ExcessFraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSpec {
    #[serde(default)]
    pub metric: ThresholdMetric,
    pub level: f64,
}

/// Scenario grid of the MSE verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MseGridConfig {
    pub nu: Vec<f64>,
    pub h: Vec<f64>,
    pub sigma2: Vec<f64>,
    #[serde(default = "one_usize")]
    pub dimension: usize,
    #[serde(default = "default_mc_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Extra `(nu, h, sigma2)` cells appended to the grid.
    #[serde(default)]
    pub extra: Vec<[f64; 3]>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn one_usize() -> usize {
    1
}
fn default_mc_samples() -> usize {
    10_000_000
}

impl Default for MseGridConfig {
    fn default() -> Self {
        Self {
            nu: vec![0.5, 1.0, 2.0],
            h: vec![0.5, 1.0, 2.0],
            sigma2: vec![0.5, 1.0, 2.0],
            dimension: 1,
            samples: default_mc_samples(),
            seed: 0,
            extra: vec![[1.0, 1.0, 1.0], [1.0, 1.0, 1e-8], [1.0, 0.0, 1.0]],
            output: OutputSpec::default(),
        }
    }
}

/// Genie comparison: random received points for a small jointly Gaussian
/// prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub variances: Vec<f64>,
    /// Common correlation coefficient between every pair of devices.
    #[serde(default)]
    pub correlation: f64,
    pub links: Vec<LinkState>,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub method: GenieMethod,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_points() -> usize {
    20
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            variances: vec![1.0, 2.0],
            correlation: 0.0,
            links: vec![LinkState { h: 1.0, sigma2: 1.0 }, LinkState { h: 0.6, sigma2: 0.5 }],
            points: default_points(),
            seed: 0,
            method: GenieMethod::Joint,
            output: OutputSpec::default(),
        }
    }
}

/// Maps a TOML error to a config error naming the offending key by its
/// dotted path, e.g. `dataset.devices`.
fn config_error(text: &str, e: toml::de::Error) -> Error {
    let message = e.message().to_string();
    let leaf = message.split('`').nth(1).map(str::to_string);
    let mut path: Vec<String> = Vec::new();
    if let Some(span) = e.span() {
        let before = &text[..span.start.min(text.len())];
        let line_start = before.rfind('\n').map_or(0, |i| i + 1);
        let line_end = text[line_start..].find('\n').map_or(text.len(), |i| line_start + i);
        let line = text[line_start..line_end].trim();
        let header = text[..line_end]
            .lines()
            .rev()
            .map(str::trim)
            .find(|l| l.starts_with('[') && !l.starts_with("[["))
            .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
        path.extend(header);
        // an error inside an inline table value: `name = { ... }`
        if let Some((name, value)) = line.split_once('=') {
            let name = name.trim();
            if value.trim_start().starts_with('{') && leaf.as_deref() != Some(name) {
                path.push(name.to_string());
            }
        }
    }
    path.extend(leaf);
    let key = if path.is_empty() { "<document>".into() } else { path.join(".") };
    Error::Config { key, message }
}

pub fn parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| config_error(text, e))
}

pub fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse(&text)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = parse(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, message: &str| Error::Config { key: key.into(), message: message.into() };
        let d = &self.dataset;
        if d.devices == 0 || d.samples_per_device == 0 || d.dimension == 0 {
            return Err(cfg("dataset", "devices, samples_per_device and dimension must be positive"));
        }
        match &self.network {
            NetworkSpec::Geometry { geometry, .. } => {
                geometry.validate().map_err(|e| cfg("network.geometry", &e.to_string()))?
            }
            NetworkSpec::LogSpaced { min_sigma2, max_sigma2, .. } => {
                if !(*min_sigma2 > 0.0 && max_sigma2 >= min_sigma2 && max_sigma2.is_finite()) {
                    return Err(cfg("network", "need 0 < min_sigma2 <= max_sigma2"));
                }
            }
            NetworkSpec::Explicit { sigma2, h, .. } => {
                if sigma2.len() != d.devices {
                    return Err(cfg("network.sigma2", "need one value per device"));
                }
                if sigma2.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                    return Err(cfg("network.sigma2", "values must be finite and non-negative"));
                }
                if let Some(h) = h {
                    if h.len() != d.devices || h.iter().any(|v| !v.is_finite()) {
                        return Err(cfg("network.h", "need one finite gain per device"));
                    }
                }
            }
        }
        let t = &self.training;
        if t.algorithms.is_empty() {
            return Err(cfg("training.algorithms", "list at least one algorithm"));
        }
        if let StepSpec::Value { gamma } = t.step {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(cfg("training.step", "gamma must be positive"));
            }
        }
        if !(t.init_std >= 0.0 && t.init_std.is_finite()) {
            return Err(cfg("training.init_std", "must be finite and non-negative"));
        }
        t.plan(t.algorithms[0], 1.0).validate().map_err(|e| cfg("training", &e.to_string()))?;
        if let Some(s) = &self.sweep {
            if s.gammas.is_empty() || s.deltas.is_empty() {
                return Err(cfg("sweep", "gammas and deltas must be non-empty"));
            }
            if s.gammas.iter().any(|g| !(*g > 0.0)) || s.deltas.iter().any(|d| !(0.0..1.0).contains(d)) {
                return Err(cfg("sweep", "need gamma > 0 and delta in [0, 1)"));
            }
        }
        if self.seeds.seeds().is_empty() {
            return Err(cfg("seeds", "no seeds"));
        }
        Ok(())
    }
}
