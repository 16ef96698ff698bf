//! TOML run configuration shared by all CLI commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SynthConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    pub patch_size: Option<usize>,
    pub context_length: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { variant: "tiny".into(), patch_size: None, context_length: None }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::named(&self.variant)?;
        if let Some(p) = self.patch_size {
            cfg.patch_size = p;
        }
        if let Some(c) = self.context_length {
            cfg.context_length = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Manifest consumed by `pretrain`, `finetune`, `evaluate`, `forecast`
    /// and `analyze`.
    pub manifest: Option<PathBuf>,
}

/// Task definition for `finetune`, `evaluate` and `forecast`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// Restricts the task to one domain.
    pub domain: Option<String>,
    /// Inferred from the labels when absent.
    pub num_classes: Option<usize>,
    pub target_dim: Option<usize>,
    pub context: usize,
    pub horizon: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self { domain: None, num_classes: None, target_dim: None, context: 336, horizon: 96 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    /// Analyse one domain instead of every registered one.
    pub domain: Option<String>,
    pub permutations: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self { domain: None, permutations: 1000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides the seeds of every section.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub synth: Option<SynthConfig>,
    pub model: ModelSection,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub task: TaskSection,
    pub analyze: AnalyzeSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // manifest paths are relative to the config file
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.data.manifest = Some(dir.join(m));
                }
            }
        }
        Ok(cfg)
    }

    /// Applies a seed override and propagates the master seed.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if seed.is_some() {
            self.seed = seed;
        }
        let seed = self.seed.unwrap_or(0);
        self.seed = Some(seed);
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.model.resolve()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
