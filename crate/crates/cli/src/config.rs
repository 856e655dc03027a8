use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fes_core::datagen::{PartitionSpec, SyntheticTaskSpec};
use fes_core::engine::EngineConfig;
use fes_core::model::ModelConfig;
use fes_core::planner::PlanSearchConfig;
use serde::{Deserialize, Serialize};

/// One experiment, fully explicit. Written back as `config.toml` next to
/// every output so a run can be reproduced from its directory alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub task: SyntheticTaskSpec,
    pub partition: PartitionSpec,
    pub model: ModelConfig,
    pub engine: EngineConfig,
    /// When set and `engine.plan` is absent, `run` plans the layer modes first.
    pub planner: Option<PlanSearchConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            task: SyntheticTaskSpec::default(),
            partition: PartitionSpec::default(),
            model: ModelConfig::default(),
            engine: EngineConfig::default(),
            planner: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        // toml's messages carry the offending key and line; keep them on one line.
        toml::from_str(text).map_err(|e| {
            anyhow::anyhow!(
                "{}",
                e.to_string()
                    .split_whitespace()
                    .collect::<Vec<_>>()
                    .join(" ")
            )
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("malformed config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.partition
            .validate(self.task.num_classes * self.task.per_class_count)?;
        self.engine.validate()?;
        if let Some(p) = &self.planner {
            p.validate()?;
        }
        if self.model.num_layers == 0 || self.model.hidden == 0 {
            bail!("invalid configuration: model.num_layers and model.hidden must be >= 1");
        }
        if self.model.pretrained && self.model.public_per_class == 0 {
            bail!(
                "invalid configuration: model.public_per_class must be >= 1 when model.pretrained"
            );
        }
        Ok(())
    }
}
