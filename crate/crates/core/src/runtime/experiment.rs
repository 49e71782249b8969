//! Experiment configuration: one TOML file naming every component's
//! settings, validated in full before any computation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::SCHEMA_VERSION;
use crate::error::{Error, Result};
use crate::explain::ExplainConfig;
use crate::offline_rl::GridSpec;
use crate::online_ppo::PpoConfig;
use crate::reward::RewardParams;
use crate::simulator::SimulatorConfig;

use super::config::parse_toml;

fn default_splits() -> usize {
    10
}

fn default_rollout() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineSection {
    #[serde(default = "default_splits")]
    pub n_splits: usize,
    #[serde(default)]
    pub grid: GridSpec,
}

impl Default for OfflineSection {
    fn default() -> Self {
        Self {
            n_splits: default_splits(),
            grid: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Master seed; every command derives its streams from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ExperimentConfig::default_out_dir")]
    pub out_dir: PathBuf,
    /// Simulator TOML, relative to the experiment file. The built-in
    /// defaults apply when absent.
    #[serde(default)]
    pub simulator: Option<PathBuf>,
    #[serde(default)]
    pub reward: RewardParams,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub offline: OfflineSection,
    #[serde(default)]
    pub explain: ExplainConfig,
    /// Fresh students per rollout evaluation.
    #[serde(default = "default_rollout")]
    pub rollout_students: u64,
}

impl ExperimentConfig {
    fn default_out_dir() -> PathBuf {
        PathBuf::from("runs")
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: Self::default_out_dir(),
            simulator: None,
            reward: RewardParams::default(),
            ppo: PpoConfig::default(),
            offline: OfflineSection::default(),
            explain: ExplainConfig::default(),
            rollout_students: default_rollout(),
        }
    }
}

/// A fully loaded and validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub simulator: SimulatorConfig,
}

impl Experiment {
    /// Validates `config` and loads referenced files. The PPO run always
    /// uses the master seed.
    pub fn from_config(mut config: ExperimentConfig, base_dir: &Path) -> Result<Self> {
        config.ppo.seed = config.seed;
        if config.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "experiment.schema_version",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    config.schema_version
                ),
            ));
        }
        let simulator = match &config.simulator {
            None => SimulatorConfig::default(),
            Some(p) => {
                let path = base_dir.join(p);
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    Error::config("experiment.simulator", format!("cannot read {}: {e}", path.display()))
                })?;
                SimulatorConfig::from_toml_str(&text)?
            }
        };
        let nest = |prefix: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config { path, message } => Error::config(format!("{prefix}{path}"), message),
                other => other,
            })
        };
        nest("experiment.", config.reward.validate())?;
        nest("experiment.", config.ppo.validate())?;
        nest("experiment.offline.", config.offline.grid.validate())?;
        if config.offline.n_splits == 0 {
            return Err(Error::config("experiment.offline.n_splits", "must be at least 1"));
        }
        nest("experiment.", config.explain.validate())?;
        Ok(Self { config, simulator })
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        Self::from_config(parse_toml(text, "experiment")?, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("experiment", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Replaces the master seed; the PPO run follows it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.seed = seed;
        self.config.ppo.seed = seed;
        self
    }
}

impl Default for Experiment {
    fn default() -> Self {
        Self::from_config(ExperimentConfig::default(), Path::new(".")).expect("defaults are valid")
    }
}
