//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use superpipe::arena::{ArenaConfig, TransferMode};
use superpipe::engine::TrainConfig;
use superpipe::model::{build_model, LayeredModel, Tensor};
use superpipe::par::Execution;
use superpipe::scheduler::{Strategy, StrategyConfig};
use superpipe::trace::TraceFormat;
use superpipe::tuner::{Objective, SweepSpec};

/// Environment variable consulted for the output directory when neither a
/// flag nor the config file sets one.
pub const OUTPUT_DIR_ENV: &str = "SUPERPIPE_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "out";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub seed: u64,
    pub n_layers: usize,
    pub d: usize,
    #[serde(default)]
    pub frozen_prefix: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadMode {
    Infer,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub mode: WorkloadMode,
    /// Inference items; ignored for training.
    #[serde(default = "one")]
    pub n_items: usize,
    /// Rows per item (inference) or per step (training).
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default)]
    pub checkpointing: bool,
}

fn one() -> usize {
    1
}

fn default_lr() -> f32 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Standard,
    CpuOnly,
    Naive,
    Superpipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    pub kind: StrategyKind,
    pub k: Option<usize>,
    pub k_prime: Option<usize>,
    #[serde(default = "default_mode")]
    pub transfer_mode: TransferMode,
}

fn default_mode() -> TransferMode {
    TransferMode::Sequential
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<TraceFormat>,
}

fn default_formats() -> Vec<TraceFormat> {
    vec![TraceFormat::Csv, TraceFormat::Json]
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: None,
            formats: default_formats(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "k_lo")]
    pub k_min: usize,
    #[serde(default = "k_hi")]
    pub k_max: usize,
    #[serde(default = "one")]
    pub k_prime_min: usize,
    #[serde(default = "kp_hi")]
    pub k_prime_max: usize,
    pub budget_bytes: Option<u64>,
    #[serde(default = "default_objective")]
    pub objective: ObjectiveName,
    #[serde(default)]
    pub execution: Execution,
}

fn k_lo() -> usize {
    2
}

fn k_hi() -> usize {
    8
}

fn kp_hi() -> usize {
    7
}

fn default_objective() -> ObjectiveName {
    ObjectiveName::MinPerItemTime
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            k_min: k_lo(),
            k_max: k_hi(),
            k_prime_min: 1,
            k_prime_max: kp_hi(),
            budget_bytes: None,
            objective: default_objective(),
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveName {
    MinPerItemTime,
    MinPeakBytes,
    MinTimeUnderBudget,
}

impl From<ObjectiveName> for Objective {
    fn from(o: ObjectiveName) -> Self {
        match o {
            ObjectiveName::MinPerItemTime => Objective::MinPerItemTime,
            ObjectiveName::MinPeakBytes => Objective::MinPeakBytes,
            ObjectiveName::MinTimeUnderBudget => Objective::MinTimeUnderBudget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub arena: ArenaConfig,
    pub workload: WorkloadSection,
    pub strategy: StrategySection,
    #[serde(default)]
    pub output: OutputSection,
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.model.n_layers == 0 || self.model.d == 0 {
            return Err(ConfigError::Invalid("model.n_layers and model.d must be >= 1".into()));
        }
        if self.model.frozen_prefix > self.model.n_layers {
            return Err(ConfigError::Invalid(format!(
                "model.frozen_prefix {} exceeds n_layers {}",
                self.model.frozen_prefix, self.model.n_layers
            )));
        }
        self.arena.validate().map_err(|e| invalid(&e))?;
        if self.workload.n_items == 0 {
            return Err(ConfigError::Invalid("workload.n_items must be >= 1".into()));
        }
        self.train_config().validate().map_err(|e| invalid(&e))?;
        self.strategy_config()?
            .validate(self.model.n_layers)
            .map_err(|e| invalid(&e))?;
        if self.output.formats.is_empty() {
            return Err(ConfigError::Invalid("output.formats must not be empty".into()));
        }
        if let Some(sweep) = &self.sweep {
            self.sweep_spec(sweep).validate().map_err(|e| invalid(&e))?;
        }
        Ok(())
    }

    pub fn strategy_config(&self) -> Result<StrategyConfig, ConfigError> {
        let s = &self.strategy;
        let need = |v: Option<usize>, name: &str| {
            v.ok_or_else(|| ConfigError::Invalid(format!("strategy.{name} is required for {:?}", s.kind)))
        };
        let strategy = match s.kind {
            StrategyKind::Standard => Strategy::Standard,
            StrategyKind::CpuOnly => Strategy::CpuOnly,
            StrategyKind::Naive => Strategy::Naive { k: need(s.k, "k")? },
            StrategyKind::Superpipeline => Strategy::Superpipeline {
                k: need(s.k, "k")?,
                k_prime: need(s.k_prime, "k_prime")?,
            },
        };
        Ok(StrategyConfig::new(strategy, s.transfer_mode))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.workload.lr,
            checkpointing: self.workload.checkpointing,
            batch_size: self.workload.batch_size,
        }
    }

    pub fn sweep_spec(&self, sweep: &SweepSection) -> SweepSpec {
        SweepSpec {
            k_range: sweep.k_min..=sweep.k_max,
            k_prime_range: sweep.k_prime_min..=sweep.k_prime_max,
            budget_bytes: sweep.budget_bytes.unwrap_or(self.arena.capacity_bytes),
            objective: sweep.objective.into(),
            transfer_mode: self.strategy.transfer_mode,
        }
    }

    pub fn build_model(&self) -> LayeredModel {
        build_model(self.model.seed, self.model.n_layers, self.model.d, self.model.frozen_prefix)
            .expect("validated model section")
    }

    /// Inference inputs, one `[batch_size, d]` tensor per item.
    pub fn inputs(&self) -> Vec<Tensor> {
        (0..self.workload.n_items as u64)
            .map(|i| Tensor::random(self.model.seed, INPUT_STREAM + i, self.workload.batch_size, self.model.d))
            .collect()
    }

    /// Training input and target.
    pub fn train_batch(&self) -> (Tensor, Tensor) {
        let (b, d) = (self.workload.batch_size, self.model.d);
        (
            Tensor::random(self.model.seed, TRAIN_X_STREAM, b, d),
            Tensor::random(self.model.seed, TRAIN_Y_STREAM, b, d),
        )
    }

    /// Flag, then config file, then environment, then the built-in default.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }
}

// Input streams start well above any layer index so they never alias a
// block's weight stream.
const INPUT_STREAM: u64 = 1 << 32;
const TRAIN_X_STREAM: u64 = (1 << 33) + 1;
const TRAIN_Y_STREAM: u64 = (1 << 33) + 2;

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
seed = 1
n_layers = 4
d = 2

[arena]
capacity_bytes = 1000
h2d_bandwidth = 24.0
d2h_bandwidth = 12.0
per_call_latency = 0.0
device_compute_rate = 8.0
host_compute_rate = 1.0

[workload]
mode = "infer"

[strategy]
kind = "superpipeline"
k = 2
k_prime = 1
"#;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: "inline".into(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.workload.n_items, 1);
        assert_eq!(cfg.output.formats, vec![TraceFormat::Csv, TraceFormat::Json]);
        assert_eq!(cfg.strategy.transfer_mode, TransferMode::Sequential);
        assert!(cfg.sweep.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("d = 2", "d = 2\nwidth = 3");
        assert!(matches!(parse(&text), Err(ConfigError::Parse { .. })));
        let text = format!("{MINIMAL}\n[extras]\nx = 1\n");
        assert!(matches!(parse(&text), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn strategy_invariants_enforced_at_load() {
        let text = MINIMAL.replace("k_prime = 1", "k_prime = 2");
        assert!(matches!(parse(&text), Err(ConfigError::Invalid(_))));
        let text = MINIMAL.replace("k_prime = 1\n", "");
        assert!(matches!(parse(&text), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn output_dir_precedence() {
        let mut cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.output_dir(Some(Path::new("flag"))), PathBuf::from("flag"));
        cfg.output.dir = Some("file".into());
        assert_eq!(cfg.output_dir(None), PathBuf::from("file"));
        assert_eq!(cfg.output_dir(Some(Path::new("flag"))), PathBuf::from("flag"));
    }
}
