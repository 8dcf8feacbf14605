//! Experiment configuration: a TOML document with a few sections.
//!
//! ```toml
//! model = "linear1d"
//! tests = ["x1"]
//!
//! [grid]
//! radius = 6.0
//! points = 241
//!
//! [schedule]
//! terminal = 1.0
//! steps = 100
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use yyf_core::{FilterModel, TestFunction, BUILTIN_MODELS};

pub const DEFAULT_SUBSTEPS: usize = 4;
pub const DEFAULT_SEEDS: usize = 50;
pub const DEFAULT_PARTICLES: usize = 10_000;
pub const DEFAULT_VALIDATION_RADII: [f64; 3] = [4.0, 6.0, 8.0];
pub const DEFAULT_VALIDATION_SAMPLES: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Name → model lookup. Starts with the built-in registry; custom models
/// are added in code.
#[derive(Clone)]
pub struct Registry {
    models: BTreeMap<String, FilterModel>,
}

impl Default for Registry {
    fn default() -> Self {
        let models = BUILTIN_MODELS
            .iter()
            .map(|n| (n.to_string(), yyf_core::builtin_model(n).expect("registry entry")))
            .collect();
        Self { models }
    }
}

impl Registry {
    pub fn register(&mut self, model: FilterModel) {
        self.models.insert(model.name().to_string(), model);
    }

    pub fn get(&self, name: &str) -> Option<&FilterModel> {
        self.models.get(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.models.keys().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub radius: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub terminal: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Kalman,
    MonteCarlo,
    ParticleFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub methods: Vec<Baseline>,
    pub particles: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Delta,
    Radius,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOracle {
    Kalman,
    FineFilter,
    ParticleFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub oracle: Option<SweepOracle>,
    pub oracle_refine: Option<usize>,
    pub space_factor: Option<usize>,
    pub particles: Option<usize>,
    /// Grid spacing held fixed across a radius sweep.
    pub spacing: Option<f64>,
    pub tail_order: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    pub radii: Option<Vec<f64>>,
    pub samples: Option<usize>,
}

/// As written in the file; optional fields are filled by [`load_config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    pub grid: GridConfig,
    pub schedule: ScheduleConfig,
    pub substeps: Option<usize>,
    /// Euler–Maruyama steps per interval when simulating paths.
    pub sim_substeps: Option<usize>,
    pub tests: Option<Vec<String>>,
    /// Explicit seed list; overrides `seeds` and `seed_base`.
    pub seed_list: Option<Vec<u64>>,
    pub seeds: Option<usize>,
    pub seed_base: Option<u64>,
    pub output: Option<PathBuf>,
    pub baseline: Option<BaselineConfig>,
    pub sweep: Option<SweepConfig>,
    pub validate: Option<ValidateConfig>,
}

/// Validated configuration with defaults applied and names resolved.
#[derive(Clone)]
pub struct Experiment {
    pub raw: ExperimentConfig,
    pub model: FilterModel,
    pub tests: Vec<TestFunction>,
    pub substeps: usize,
    pub sim_substeps: usize,
    pub seeds: Vec<u64>,
}

impl Experiment {
    /// SHA-256 of the resolved configuration (output location excluded),
    /// first 16 hex digits.
    pub fn hash(&self) -> String {
        let mut canonical = self.raw.clone();
        canonical.output = None;
        canonical.substeps = Some(self.substeps);
        canonical.sim_substeps = Some(self.sim_substeps);
        canonical.seed_list = Some(self.seeds.clone());
        canonical.seeds = None;
        canonical.seed_base = None;
        canonical.tests = Some(self.tests.iter().map(|t| t.label().to_string()).collect());
        let json = serde_json::to_string(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    /// The comment line every output file starts with.
    pub fn header(&self) -> String {
        format!("yyf {} config={}", env!("CARGO_PKG_VERSION"), self.hash())
    }

    pub fn particles(&self) -> usize {
        self.raw
            .baseline
            .as_ref()
            .and_then(|b| b.particles)
            .unwrap_or(DEFAULT_PARTICLES)
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn load_config(path: &Path) -> Result<Experiment, ConfigError> {
    load_config_with(path, &Registry::default(), None)
}

/// Reads, parses and validates `path`. `seed_base` overrides the file's.
pub fn load_config_with(
    path: &Path,
    registry: &Registry,
    seed_base: Option<u64>,
) -> Result<Experiment, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut raw: ExperimentConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        line: e.span().map(|s| line_of(&text, s.start)).unwrap_or(1),
        message: e.message().to_string(),
    })?;
    if seed_base.is_some() {
        raw.seed_base = seed_base;
    }
    resolve(raw, registry)
}

pub fn resolve(raw: ExperimentConfig, registry: &Registry) -> Result<Experiment, ConfigError> {
    let model = registry
        .get(&raw.model)
        .ok_or_else(|| {
            invalid(
                "model",
                format!("unknown model '{}'; registered: {}", raw.model, registry.names().join(", ")),
            )
        })?
        .clone();

    if !(raw.grid.radius > 1.0 && raw.grid.radius.is_finite()) {
        return Err(invalid("grid.radius", "R must be > 1"));
    }
    if raw.grid.points < 3 || raw.grid.points % 2 == 0 {
        return Err(invalid("grid.points", "M must be odd and ≥ 3"));
    }
    if !(raw.schedule.terminal > 0.0 && raw.schedule.terminal.is_finite()) {
        return Err(invalid("schedule.terminal", "T must be > 0"));
    }
    if raw.schedule.steps < 1 {
        return Err(invalid("schedule.steps", "K must be ≥ 1"));
    }

    let substeps = defaulted("substeps", raw.substeps, DEFAULT_SUBSTEPS);
    let sim_substeps = defaulted("sim_substeps", raw.sim_substeps, DEFAULT_SUBSTEPS);
    if substeps < 1 {
        return Err(invalid("substeps", "must be ≥ 1"));
    }
    if sim_substeps < 1 {
        return Err(invalid("sim_substeps", "must be ≥ 1"));
    }

    let tests = match &raw.tests {
        Some(labels) => labels
            .iter()
            .map(|l| TestFunction::from_label(l, model.dim()).map_err(|e| invalid("tests", e.to_string())))
            .collect::<Result<Vec<_>, _>>()?,
        None => {
            log::info!("default applied: tests = model defaults");
            model.test_functions().to_vec()
        }
    };
    if tests.is_empty() {
        return Err(invalid("tests", "at least one test function required"));
    }

    let seeds = match &raw.seed_list {
        Some(list) if list.is_empty() => return Err(invalid("seed_list", "must not be empty")),
        Some(list) => list.clone(),
        None => {
            let n = defaulted("seeds", raw.seeds, DEFAULT_SEEDS);
            if n == 0 {
                return Err(invalid("seeds", "must be ≥ 1"));
            }
            let base = defaulted("seed_base", raw.seed_base, 0);
            (base..base + n as u64).collect()
        }
    };

    if let Some(b) = &raw.baseline {
        if b.methods.is_empty() {
            return Err(invalid("baseline.methods", "must not be empty"));
        }
        if b.methods.contains(&Baseline::Kalman) && model.linear().is_none() {
            return Err(invalid("baseline.methods", format!("Kalman needs a linear model, '{}' is not", raw.model)));
        }
        if b.particles == Some(0) {
            return Err(invalid("baseline.particles", "must be ≥ 1"));
        }
    }
    if let Some(s) = &raw.sweep {
        if s.values.is_empty() {
            return Err(invalid("sweep.values", "must not be empty"));
        }
        if s.values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(invalid("sweep.values", "values must be positive"));
        }
        if s.axis == SweepAxis::Radius {
            if s.values.len() < 3 {
                return Err(invalid("sweep.values", "a radius sweep needs at least three radii"));
            }
            if s.spacing.is_some_and(|h| h <= 0.0) {
                return Err(invalid("sweep.spacing", "must be positive"));
            }
        }
        if s.oracle == Some(SweepOracle::Kalman) && model.linear().is_none() {
            return Err(invalid("sweep.oracle", format!("Kalman needs a linear model, '{}' is not", raw.model)));
        }
    }
    if let Some(v) = &raw.validate {
        if v.radii.as_ref().is_some_and(|r| r.is_empty() || r.iter().any(|x| *x <= 0.0)) {
            return Err(invalid("validate.radii", "radii must be positive and non-empty"));
        }
        if v.samples.is_some_and(|s| s < 2) {
            return Err(invalid("validate.samples", "must be ≥ 2"));
        }
    }

    Ok(Experiment {
        raw,
        model,
        tests,
        substeps,
        sim_substeps,
        seeds,
    })
}

fn defaulted<T: Copy + std::fmt::Display>(field: &str, value: Option<T>, default: T) -> T {
    value.unwrap_or_else(|| {
        log::info!("default applied: {field} = {default}");
        default
    })
}
