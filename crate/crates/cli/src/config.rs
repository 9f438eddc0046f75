use std::fmt;
use std::path::{Path, PathBuf};

use attralign_core::alignment::JointEstimator;
use attralign_core::controller::SolverConfig;
use attralign_core::generative::TrainConfig;
use attralign_core::TargetPreset;
use serde::{Deserialize, Serialize};

/// Bad or missing input; maps to exit status 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn read_input(path: &Path) -> anyhow::Result<String> {
    if !path.is_file() {
        return Err(InputError(format!("input file not found: {}", path.display())).into());
    }
    Ok(std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Edm,
    Ddim,
    Fm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    /// Closed-form fields of the configured mixture.
    #[default]
    Analytic,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Uniform,
    Karras,
}

/// Step count always comes from `solver.steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// EDM only: solver horizon `T`, equal to the prior noise level.
    pub horizon: f64,
    /// EDM only.
    pub spacing: Spacing,
    /// EDM Karras spacing only.
    pub sigma_min: f64,
    pub karras_rho: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: attralign_core::dynamics::TOY_EDM_HORIZON,
            spacing: Spacing::Uniform,
            sigma_min: 0.002,
            karras_rho: 7.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleSource {
    /// RBF oracle centered on the mixture's class means.
    Rbf { temperature: f64 },
    /// One classifier checkpoint per axis, in axis order.
    Classifier {
        heads: Vec<PathBuf>,
        #[serde(default = "default_classifier_temperature")]
        temperature: f64,
    },
}

/// Logit temperature for trained classifier heads. Calibrated for the
/// default training recipe, whose heads saturate at temperature 1.
pub const DEFAULT_CLASSIFIER_TEMPERATURE: f64 = 3.0;

fn default_classifier_temperature() -> f64 {
    DEFAULT_CLASSIFIER_TEMPERATURE
}

impl Default for OracleSource {
    fn default() -> Self {
        OracleSource::Rbf {
            temperature: attralign_core::alignment::DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSource {
    Preset {
        preset: TargetPreset,
        #[serde(default)]
        joint: bool,
    },
    File(PathBuf),
}

impl Default for TargetSource {
    fn default() -> Self {
        TargetSource::Preset {
            preset: TargetPreset::Uniform,
            joint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub hidden: Vec<usize>,
    pub generator: TrainConfig,
    pub classifier: TrainConfig,
    /// Upper end of the log-uniform DSM noise range.
    pub dsm_sigma_max: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            generator: TrainConfig {
                steps: 4000,
                batch_size: 128,
                lr: 2e-3,
            },
            classifier: TrainConfig {
                steps: 1500,
                batch_size: 128,
                lr: 2e-3,
            },
            dsm_sigma_max: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Batch size M.
    Batch,
    /// Iteration budget I.
    Iters,
    /// Grid steps K.
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mixture spec: training data, RBF class centers, reference draws.
    pub mixture: PathBuf,
    #[serde(default)]
    pub model: ModelSource,
    pub instance: InstanceKind,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub oracle: OracleSource,
    #[serde(default)]
    pub target: TargetSource,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Samples pooled for evaluation.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_samples() -> usize {
    4096
}

impl ExperimentConfig {
    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = read_input(path)?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| InputError(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.mixture);
        fix(&mut cfg.out_dir);
        if let ModelSource::Checkpoint(p) = &mut cfg.model {
            fix(p);
        }
        if let OracleSource::Classifier { heads, .. } = &mut cfg.oracle {
            heads.iter_mut().for_each(fix);
        }
        if let TargetSource::File(p) = &mut cfg.target {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.solver
            .validate()
            .map_err(|e| InputError(format!("invalid solver config: {e}")))?;
        if self.samples < self.solver.batch {
            return Err(InputError(format!(
                "samples ({}) must be at least the batch size ({})",
                self.samples, self.solver.batch
            ))
            .into());
        }
        Ok(())
    }

    pub fn estimator(&self) -> JointEstimator {
        self.solver.joint_estimator
    }
}
