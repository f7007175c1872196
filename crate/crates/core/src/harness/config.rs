//! Run configuration, stored as TOML. The resolved config is written next to
//! every run's outputs, and its hash is embedded in checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grpo::GrpoConfig;
use crate::reward::{RewardConfig, WeightsError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error at `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Training instances (synthetic source).
    pub n: usize,
    pub d: usize,
    /// Held-out instances for evaluation (synthetic source).
    pub heldout_n: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            n: 2000,
            d: crate::dataset::DEFAULT_FEATURE_DIM,
            heldout_n: 500,
            seed: 0,
            path: None,
            heldout_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    #[default]
    Synthetic,
    Ingested,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsConfig {
    pub mode: AgentMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    /// Share of the training instances held back for the cold start.
    pub fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            fraction: 0.2,
            epochs: 400,
            learning_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub agents: AgentsConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub rewards: RewardConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            agents: AgentsConfig::default(),
            sft: SftConfig::default(),
            grpo: desk_grpo(),
            rewards: RewardConfig::default(),
        }
    }
}

/// GRPO settings sized for the toy policy on a single core: fewer, smaller
/// batches than the library default and a much larger step.
pub fn desk_grpo() -> GrpoConfig {
    GrpoConfig {
        iterations: 1000,
        batch_size: 128,
        learning_rate: 1.0,
        ..GrpoConfig::default()
    }
}

fn require_file(field: &str, path: &Option<PathBuf>) -> Result<(), ConfigError> {
    match path {
        None => Err(ConfigError::new(field, "required in this mode")),
        Some(p) if !p.is_file() => Err(ConfigError::new(field, format!("{} does not exist", p.display()))),
        Some(_) => Ok(()),
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| {
            let field = e
                .span()
                .map(|sp| format!("byte {}..{}", sp.start, sp.end))
                .unwrap_or_else(|| "<file>".into());
            ConfigError::new(field, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("<file>", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the TOML form with `output_dir` cleared, so the same run
    /// written to two places hashes the same.
    pub fn hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Sha256::digest(c.to_toml_string().as_bytes()).into()
    }

    /// Sets both the data seed and the training seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.grpo.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let ds = &self.dataset;
        match ds.source {
            DataSource::Synthetic => {
                if ds.n == 0 || ds.n % 2 != 0 {
                    return Err(ConfigError::new("dataset.n", format!("must be positive and even, got {}", ds.n)));
                }
                if ds.heldout_n % 2 != 0 {
                    return Err(ConfigError::new("dataset.heldout_n", format!("must be even, got {}", ds.heldout_n)));
                }
                if ds.d == 0 {
                    return Err(ConfigError::new("dataset.d", "must be positive"));
                }
            }
            DataSource::File => {
                require_file("dataset.path", &ds.path)?;
                if ds.heldout_path.is_some() {
                    require_file("dataset.heldout_path", &ds.heldout_path)?;
                }
            }
        }
        if self.agents.mode == AgentMode::Ingested {
            require_file("agents.semantic_path", &self.agents.semantic_path)?;
            require_file("agents.frequency_path", &self.agents.frequency_path)?;
            require_file("agents.dual_path", &self.agents.dual_path)?;
        }
        let sft = &self.sft;
        if !(0.0..=1.0).contains(&sft.fraction) {
            return Err(ConfigError::new("sft.fraction", format!("must be in [0, 1], got {}", sft.fraction)));
        }
        if !(sft.learning_rate >= 0.0 && sft.learning_rate.is_finite()) {
            return Err(ConfigError::new("sft.learning_rate", "must be finite and >= 0"));
        }
        self.grpo
            .validate()
            .map_err(|(field, message)| ConfigError::new(format!("grpo.{field}"), message))?;
        self.rewards.weights.validate().map_err(|e| match e {
            WeightsError::Negative(name, _) => ConfigError::new(format!("rewards.weights.{name}"), e.to_string()),
            WeightsError::AllZero => ConfigError::new("rewards.weights", e.to_string()),
        })?;
        let eps = self.rewards.bce_epsilon;
        if !(eps > 0.0 && eps < 0.5) {
            return Err(ConfigError::new("rewards.bce_epsilon", format!("must be in (0, 0.5), got {eps}")));
        }
        Ok(())
    }
}
