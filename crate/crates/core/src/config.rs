//! Top-level run configuration: every module's settings plus seeds, read
//! from JSON with unknown keys rejected and every field defaulted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::reflect::AdaptConfig;
use crate::segmentor::SegmentorConfig;
use crate::similarity::SimilarityConfig;
use crate::synthesizer::SynthConfig;
use crate::train::{SegTrainConfig, SynthTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub segmentor: SegmentorConfig,
    pub synthesizer: SynthConfig,
    pub similarity: SimilarityConfig,
    pub adapt: AdaptConfig,
    pub train_segmentor: SegTrainConfig,
    pub train_synthesizer: SynthTrainConfig,
    /// Seed of model initialisation.
    pub model_seed: u64,
    /// Worker threads for data-parallel loops.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            segmentor: SegmentorConfig::default(),
            synthesizer: SynthConfig::default(),
            similarity: SimilarityConfig::default(),
            adapt: AdaptConfig::default(),
            train_segmentor: SegTrainConfig::default(),
            train_synthesizer: SynthTrainConfig::default(),
            model_seed: 0,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serialises");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.data.scene.validate().map_err(cfg_err)?;
        self.data.shift.validate().map_err(cfg_err)?;
        self.segmentor.validate().map_err(cfg_err)?;
        self.synthesizer.validate().map_err(cfg_err)?;
        self.similarity.validate().map_err(cfg_err)?;
        self.adapt.validate().map_err(cfg_err)?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.segmentor.k_classes != self.data.scene.k_classes {
            return Err(Error::Config(format!(
                "segmentor has {} classes, scenes have {}",
                self.segmentor.k_classes, self.data.scene.k_classes
            )));
        }
        Ok(())
    }
}
