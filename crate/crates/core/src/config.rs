//! Whole-pipeline configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DiagnosticCohortConfig, SyntheticCohortConfig};
use crate::error::{Error, Result};
use crate::recurrent::BiLstmConfig;
use crate::stem::ExtractorConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSection {
    #[serde(default)]
    pub model: ExtractorConfig,
    #[serde(default = "TrainConfig::extractor_desk")]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorSection {
    #[serde(default)]
    pub model: BiLstmConfig,
    #[serde(default = "TrainConfig::predictor_desk")]
    pub train: TrainConfig,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        Self {
            model: ExtractorConfig::default(),
            train: TrainConfig::extractor_desk(),
        }
    }
}

impl Default for PredictorSection {
    fn default() -> Self {
        Self {
            model: BiLstmConfig::desk(),
            train: TrainConfig::predictor_desk(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub synth: SyntheticCohortConfig,
    #[serde(default)]
    pub diagnostic: DiagnosticCohortConfig,
    #[serde(default)]
    pub extractor: ExtractorSection,
    #[serde(default)]
    pub predictor: PredictorSection,
    /// Copies per minority subject, original included; `None` uses
    /// `round(majority / minority)`.
    #[serde(default)]
    pub rebalance_multiplier: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    /// Small models and short schedules that run on one CPU core.
    pub fn desk() -> Self {
        Self {
            synth: SyntheticCohortConfig::default(),
            diagnostic: DiagnosticCohortConfig::default(),
            extractor: ExtractorSection::default(),
            predictor: PredictorSection::default(),
            rebalance_multiplier: None,
        }
    }

    /// Full-size encoder and recurrent widths with the long schedules.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.extractor.model = ExtractorConfig::paper();
        cfg.extractor.train = TrainConfig::extractor_paper();
        cfg.predictor.model = BiLstmConfig::paper();
        cfg.predictor.train = TrainConfig::predictor_paper();
        cfg
    }

    /// Points every seeded component at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.diagnostic.seed = seed;
        self.extractor.train.seed = seed;
        self.predictor.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.extractor.model.vit.validate()?;
        self.extractor.model.stem.validate()?;
        self.extractor.train.validate()?;
        self.predictor.model.validate()?;
        self.predictor.train.validate()?;
        if self.rebalance_multiplier == Some(0) {
            return Err(Error::config("rebalance multiplier must be at least 1"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
