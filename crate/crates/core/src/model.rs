//! Model configuration and the assembled encoder + flow decoder.

use serde::{Deserialize, Serialize};

use crate::decoder::{FlowDecoder, UNetConfig};
use crate::encoder::{EncoderConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::sequence::DEFAULT_FRAME_RATE;
use crate::tensor::{ParamStore, Rng};
use crate::train::{OtcfmConfig, ScoreMatchingConfig};

/// Training objective, and therefore the meaning of the decoder output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Otcfm,
    #[serde(alias = "sm")]
    ScoreMatching,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "otcfm" => Ok(Regime::Otcfm),
            "sm" | "score_matching" => Ok(Regime::ScoreMatching),
            other => Err(Error::Config(format!("unknown regime `{other}` (expected otcfm or sm)"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Otcfm => "otcfm",
            Regime::ScoreMatching => "sm",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub acoustic_dim: usize,
    pub motion_dim: usize,
    pub frame_rate: f64,
    pub regime: Regime,
    pub encoder: EncoderConfig,
    pub decoder: UNetConfig,
    pub otcfm: OtcfmConfig,
    pub score_matching: ScoreMatchingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            acoustic_dim: 80,
            motion_dim: 45,
            frame_rate: DEFAULT_FRAME_RATE,
            regime: Regime::Otcfm,
            encoder: EncoderConfig::default(),
            decoder: UNetConfig::default(),
            otcfm: OtcfmConfig::default(),
            score_matching: ScoreMatchingConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU experiments on the toy corpus.
    pub fn desk(vocab_size: usize, acoustic_dim: usize, motion_dim: usize) -> Self {
        Self {
            vocab_size,
            acoustic_dim,
            motion_dim,
            encoder: EncoderConfig {
                dim: 64,
                depth: 3,
                heads: 4,
                head_dim: 16,
                ff_mult: 2,
                duration_channels: 64,
                duration_kernel: 3,
            },
            decoder: UNetConfig::desk(),
            ..Self::default()
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.acoustic_dim + self.motion_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_dim() == 0 || self.vocab_size == 0 {
            return Err(Error::Config("model needs a nonzero vocabulary and output size".into()));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::Config("frame_rate must be positive".into()));
        }
        self.decoder.validate()?;
        self.otcfm.validate()?;
        self.score_matching.validate()
    }
}

/// Encoder and decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: TextEncoder,
    pub decoder: FlowDecoder,
}

impl Model {
    /// Builds a model with parameters initialized from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let root = Rng::new(seed, 0);
        let d = config.joint_dim();
        let encoder = TextEncoder::new(&mut store, &config.encoder, config.vocab_size, d, &mut root.named("init.encoder"))?;
        let decoder = FlowDecoder::new(&mut store, &config.decoder, d, &mut root.named("init.decoder"))?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn decoder_params(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("decoder."))
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::desk(8, 8, 5);
        let a = Model::new(cfg.clone(), 3).unwrap();
        let b = Model::new(cfg.clone(), 3).unwrap();
        let c = Model::new(cfg, 4).unwrap();
        let eq = |x: &Model, y: &Model| x.store.iter().zip(y.store.iter()).all(|((_, p), (_, q))| p.value == q.value);
        assert!(eq(&a, &b));
        assert!(!eq(&a, &c));
    }

    #[test]
    fn full_config_is_tens_of_millions() {
        let m = Model::new(ModelConfig::default(), 0).unwrap();
        let n = m.num_params();
        assert!((3_000_000..300_000_000).contains(&n), "{n} parameters");
        assert!(m.decoder_params() * 2 > n);
    }

    #[test]
    fn regime_parses_cli_names() {
        assert_eq!("otcfm".parse::<Regime>().unwrap(), Regime::Otcfm);
        assert_eq!("sm".parse::<Regime>().unwrap(), Regime::ScoreMatching);
        assert!("ddpm".parse::<Regime>().is_err());
    }
}
