//! TOML run configuration.
//!
//! A file only needs the keys it changes; everything else keeps the value
//! from [`RunConfig::default`]. Unknown keys are errors.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ToyCorpusConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: ToyCorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = ToyCorpusConfig::default();
        let model = ModelConfig {
            frame_rate: corpus.frame_rate,
            ..ModelConfig::desk(corpus.vocab_size, corpus.acoustic_dim, corpus.motion_dim)
        };
        Self {
            corpus,
            model,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(format!("{e}")))?;
        merge(&mut base, over);
        let cfg: RunConfig = base.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("{e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hash_text(&self.to_toml()?))
    }
}

/// Hex SHA-256 of `text`.
pub fn hash_text(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
