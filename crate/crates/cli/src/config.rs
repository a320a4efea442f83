use std::path::{Path, PathBuf};

use mpg_core::checkpoint::Precision;
use mpg_core::molgnet::MolGNetConfig;
use mpg_core::ssl::PretrainConfig;
use mpg_core::tasks::FinetuneConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Everything a run depends on. The seed fixes sample order,
/// initialization and masking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: MolGNetConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            model: MolGNetConfig::desk(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// The configuration stored in checkpoints: locations are dropped so that
    /// the same run written to two directories yields identical files.
    pub fn snapshot(&self) -> Result<String, CliError> {
        Self {
            paths: Paths::default(),
            ..self.clone()
        }
        .to_toml()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(CliError::Usage("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain.mask_rate) {
            return Err(CliError::Usage("mask_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
