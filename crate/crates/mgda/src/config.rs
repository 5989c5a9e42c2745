//! Experiment configuration: a TOML schema with strict key validation,
//! plus the resolved-config echo used for reproducibility.

use crate::data::{MacroscopicSchema, SyntheticCfConfig, SyntheticLwrConfig, TrajectorySchema};
use crate::physics::{GaConfig, IdmParams};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config serialize: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Lwr,
    Carfollowing,
    Toy,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Lwr => "lwr",
            TaskKind::Carfollowing => "carfollowing",
            TaskKind::Toy => "toy",
        }
    }
}

/// Where the data comes from: CSV files (with optional column-mapping
/// schemas) or synthetic generation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub macroscopic_csv: Option<PathBuf>,
    pub trajectories_csv: Option<PathBuf>,
    pub macroscopic_schema: Option<MacroscopicSchema>,
    pub trajectory_schema: Option<TrajectorySchema>,
    pub synthetic_cf: Option<SyntheticCfConfig>,
    pub synthetic_lwr: Option<SyntheticLwrConfig>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub punn_hidden_layers: usize,
    pub punn_hidden_width: usize,
    pub fd_hidden_layers: usize,
    pub fd_hidden_width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            punn_hidden_layers: 8,
            punn_hidden_width: 20,
            fd_hidden_layers: 2,
            fd_hidden_width: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { ratio: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollocationConfig {
    pub n: usize,
    pub seed: u64,
}

impl Default for CollocationConfig {
    fn default() -> Self {
        CollocationConfig { n: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub dim: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { dim: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub collocation: CollocationConfig,
    #[serde(default)]
    pub toy: ToyConfig,
    /// Calibrated IDM parameters; calibrated on the fly when absent.
    #[serde(default)]
    pub idm: Option<IdmParams>,
    #[serde(default)]
    pub ga: Option<GaConfig>,
    /// Cap on observation count (0 = use everything).
    #[serde(default)]
    pub max_observations: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the fully resolved config (defaults filled) into the run
    /// directory before any work happens.
    pub fn echo_into(&self, dir: &Path) -> Result<(), ConfigError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml_string()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.task {
            TaskKind::Lwr => {
                if self.data.macroscopic_csv.is_none() && self.data.synthetic_lwr.is_none() {
                    return Err(ConfigError::Invalid(
                        "lwr task needs data.macroscopic_csv or data.synthetic_lwr".into(),
                    ));
                }
            }
            TaskKind::Carfollowing => {
                if self.data.trajectories_csv.is_none() && self.data.synthetic_cf.is_none() {
                    return Err(ConfigError::Invalid(
                        "carfollowing task needs data.trajectories_csv or data.synthetic_cf".into(),
                    ));
                }
            }
            TaskKind::Toy => {}
        }
        if !(0.0..=1.0).contains(&self.split.ratio) {
            return Err(ConfigError::Invalid("split.ratio must be in [0, 1]".into()));
        }
        if self.train.learning_rate <= 0.0 {
            return Err(ConfigError::Invalid("train.learning_rate must be positive".into()));
        }
        if let Some(w) = &self.train.weights {
            if w.alpha < 0.0 || w.beta < 0.0 {
                return Err(ConfigError::Invalid("train.weights must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        task = "toy"
    "#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.task, TaskKind::Toy);
        assert_eq!(cfg.split.ratio, 0.8);
        assert_eq!(cfg.network.punn_hidden_layers, 8);
        assert_eq!(cfg.toy.dim, 20);
    }

    #[test]
    fn unknown_keys_rejected() {
        let s = r#"
            task = "toy"
            not_a_key = 3
        "#;
        assert!(matches!(ExperimentConfig::from_toml_str(s), Err(ConfigError::Toml(_))));
        let nested = r#"
            task = "toy"
            [train]
            learning_rte = 0.1
        "#;
        assert!(matches!(ExperimentConfig::from_toml_str(nested), Err(ConfigError::Toml(_))));
    }

    #[test]
    fn task_data_requirements_enforced() {
        let s = r#" task = "lwr" "#;
        assert!(matches!(ExperimentConfig::from_toml_str(s), Err(ConfigError::Invalid(_))));
        let ok = r#"
            task = "lwr"
            [data.synthetic_lwr]
            noise_sigma = 0.02
        "#;
        let cfg = ExperimentConfig::from_toml_str(ok).unwrap();
        assert_eq!(cfg.data.synthetic_lwr.unwrap().noise_sigma, 0.02);
    }

    #[test]
    fn echo_roundtrips() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let echoed = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&echoed).unwrap();
        assert_eq!(back.task, cfg.task);
        assert_eq!(back.train.max_epochs, cfg.train.max_epochs);
    }

    #[test]
    fn carfollowing_synthetic_block_parses() {
        let s = r#"
            task = "carfollowing"
            max_observations = 300

            [data.synthetic_cf]
            horizon = 40.0
            noise_sigma = 0.05
            n_trajectories = 10

            [data.synthetic_cf.profile]
            kind = "stop_and_go"
            v_high = 14.0
            v_low = 4.0
            period = 20.0

            [train]
            method = "dcgd_center"
            max_epochs = 500
        "#;
        let cfg = ExperimentConfig::from_toml_str(s).unwrap();
        assert_eq!(cfg.max_observations, 300);
        let syn = cfg.data.synthetic_cf.unwrap();
        assert_eq!(syn.n_trajectories, 10);
        match syn.profile {
            crate::data::LeaderProfile::StopAndGo { v_high, .. } => assert_eq!(v_high, 14.0),
            other => panic!("{other:?}"),
        }
    }
}
