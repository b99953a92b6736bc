//! Engine configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use conplan_core::{calibrate, Calibration, Gamma};
use conplan_planner::backend::{BackendDescriptor, BackendKind};
use conplan_planner::session::{
    Limits, PlanMode, PlannerSettings, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_MAX_ICL_ITERATIONS, DEFAULT_N_CANDIDATES,
};
use conplan_planner::harness::DEFAULT_STAGE_CAP;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scores::{read_scores, ScoresError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error(transparent)]
    Scores(#[from] ScoresError),
    #[error("calibration failed: {0}")]
    Calibration(#[from] conplan_core::DomainError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where the abstention threshold comes from. Exactly one form is allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThresholdTable", into = "ThresholdTable")]
pub enum ThresholdSource {
    Fixed { gamma: f64 },
    Calibrated { calibration_file: PathBuf, kappa: f64 },
}

/// Wire form of [`ThresholdSource`]; serde cannot reject unknown fields per
/// untagged variant, so the choice is made here.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdTable {
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kappa: Option<f64>,
}

impl TryFrom<ThresholdTable> for ThresholdSource {
    type Error = String;

    fn try_from(t: ThresholdTable) -> Result<Self, String> {
        match t {
            ThresholdTable {
                gamma: Some(gamma),
                calibration_file: None,
                kappa: None,
            } => Ok(ThresholdSource::Fixed { gamma }),
            ThresholdTable {
                gamma: None,
                calibration_file: Some(calibration_file),
                kappa: Some(kappa),
            } => Ok(ThresholdSource::Calibrated { calibration_file, kappa }),
            _ => Err("threshold needs either `gamma` or both `calibration_file` and `kappa`".into()),
        }
    }
}

impl From<ThresholdSource> for ThresholdTable {
    fn from(s: ThresholdSource) -> Self {
        match s {
            ThresholdSource::Fixed { gamma } => ThresholdTable {
                gamma: Some(gamma),
                ..Default::default()
            },
            ThresholdSource::Calibrated { calibration_file, kappa } => ThresholdTable {
                calibration_file: Some(calibration_file),
                kappa: Some(kappa),
                ..Default::default()
            },
        }
    }
}

impl Default for ThresholdSource {
    fn default() -> Self {
        ThresholdSource::Fixed { gamma: DEFAULT_GAMMA }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: Option<String>,
    /// Static bearer token required on API calls when set.
    pub api_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub backend: BackendDescriptor,
    pub n_candidates: usize,
    pub beta: f64,
    pub threshold: ThresholdSource,
    pub max_icl_iterations: usize,
    pub max_stages: usize,
    pub seed: u64,
    pub persistence_path: PathBuf,
    pub server: ServerConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            backend: BackendDescriptor::scripted(),
            n_candidates: DEFAULT_N_CANDIDATES,
            beta: DEFAULT_BETA,
            threshold: ThresholdSource::default(),
            max_icl_iterations: DEFAULT_MAX_ICL_ITERATIONS,
            max_stages: DEFAULT_STAGE_CAP,
            seed: 0,
            persistence_path: PathBuf::from("sessions"),
            server: ServerConfig::default(),
        }
    }
}

impl EngineConfig {
    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: EngineConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.persistence_path.is_relative() {
            config.persistence_path = base.join(&config.persistence_path);
        }
        if let ThresholdSource::Calibrated { calibration_file, .. } = &mut config.threshold {
            if calibration_file.is_relative() {
                *calibration_file = base.join(&*calibration_file);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: EngineConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backend
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match &self.threshold {
            ThresholdSource::Fixed { gamma } if !gamma.is_finite() => {
                return Err(ConfigError::Invalid(format!("gamma must be finite, got {gamma}")));
            }
            ThresholdSource::Calibrated { kappa, .. } if !(*kappa > 0.0 && *kappa <= 1.0) => {
                return Err(ConfigError::Invalid(format!("kappa must lie in (0, 1], got {kappa}")));
            }
            _ => {}
        }
        self.settings_with(Gamma::Finite(0.0), PlanMode::Harness)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Resolves the threshold, calibrating from the scores file if needed.
    pub fn resolve_threshold(&self) -> Result<(Gamma, Option<Calibration>), ConfigError> {
        match &self.threshold {
            ThresholdSource::Fixed { gamma } => Ok((Gamma::Finite(*gamma), None)),
            ThresholdSource::Calibrated { calibration_file, kappa } => {
                let scores = read_scores(calibration_file)?;
                let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
                let model = calibrate(&values, *kappa)?;
                Ok((model.threshold, Some(model)))
            }
        }
    }

    fn settings_with(&self, threshold: Gamma, mode: PlanMode) -> PlannerSettings {
        PlannerSettings {
            n_candidates: self.n_candidates,
            beta: self.beta,
            threshold,
            mode,
            limits: Limits {
                max_icl_iterations: self.max_icl_iterations,
                max_stages: self.max_stages,
            },
            constraints: Vec::new(),
        }
    }

    pub fn planner_settings(&self, mode: PlanMode) -> Result<PlannerSettings, ConfigError> {
        let (threshold, _) = self.resolve_threshold()?;
        Ok(self.settings_with(threshold, mode))
    }

    /// Settings for a session on the given backend: scripted runs use the
    /// ground-truth completion guard, remote runs ask the model as well.
    pub fn settings_for(&self, kind: BackendKind) -> Result<PlannerSettings, ConfigError> {
        self.planner_settings(match kind {
            BackendKind::Scripted => PlanMode::Harness,
            BackendKind::RemoteChat => PlanMode::Live,
        })
    }
}
