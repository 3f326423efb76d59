use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sim::SimConfig;
use crate::train::TrainConfig;

use super::verify::VerifyConfig;

/// Contents of a `--config` TOML file. Every section is optional.
///
/// ```
/// use icarus::cli::RunConfig;
///
/// let cfg = RunConfig::from_toml_str(r#"
///     seed = 7
///
///     [train]
///     steps = 20
///
///     [sim.workload]
///     num_agents = 4
/// "#).unwrap();
/// assert_eq!(cfg.train.seed, 7);
/// assert_eq!(cfg.sim.workload.seed, 7);
/// assert_eq!(cfg.sim.workload.num_agents, 4);
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seed of every section when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Model used by `train` and `verify`; `sim` has its own.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub verify: VerifyConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::parse(text).map_err(Error::Config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            // nested library errors already carry their own prefix
            let msg = e.message().trim();
            msg.strip_prefix("invalid configuration: ").unwrap_or(msg).to_string()
        })?;
        if let Some(s) = cfg.seed {
            cfg.set_seed(s);
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.train.seed = seed;
        self.sim.workload.seed = seed;
        self.verify.seed = seed;
    }
}
