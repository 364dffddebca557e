//! Run configuration: one TOML document covering every tunable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::GuidanceConfig;
use crate::train::{TokenizerStage, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training set, relative to the work directory.
    pub dir: PathBuf,
    pub eval_count: usize,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            eval_count: 128,
            eval_seed: 1234,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; copied into every stage seed by [`RunConfig::resolved`].
    pub seed: u64,
    /// Run directory for checkpoints and logs, relative to the work directory.
    pub out: PathBuf,
    /// Checkpoint holding a trained tokenizer and backbone; when set, the
    /// first two stages are skipped.
    pub pretrained: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub tokenizer: TokenizerStage,
    /// Class-conditional backbone stage (no control).
    pub pretrain: TrainConfig,
    /// Control fine-tuning stage.
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            pretrained: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            tokenizer: TokenizerStage::default(),
            pretrain: TrainConfig {
                epochs: 20,
                ..Default::default()
            },
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.guidance.validate(self.model.backbone.vocab)?;
        if self.tokenizer.batch_size == 0 {
            return Err(Error::invalid("tokenizer batch size must be positive"));
        }
        self.train.projection.validate(
            self.model.backbone.layers,
            4 * self.model.encoder.width,
            self.model.backbone.d_model,
        )
    }

    /// Copy with the master seed pushed into every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = c.seed;
        c.train.seed = c.seed;
        c.guidance.seed = c.seed;
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RunConfig { seed, ..self.clone() }.resolved()
    }
}
