use std::time::Instant;

use super::ToyUtterance;
use crate::align::upsample_tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::sampler::{condition, solve_from, SamplerConfig, Synthesis, Timing};
use crate::sequence::JointFrameSequence;
use crate::tensor::Rng;
use crate::train::{align_dataset, train, MetricsRecord, TrainConfig, Trainer};

/// Two single-modality models that share only the token input.
#[derive(Clone, Debug)]
pub struct MarginalBaseline {
    pub acoustic: Model,
    pub motion: Model,
}

/// Single-modality copies of `data` for the acoustic and motion models.
pub fn split_dataset(data: &[ToyUtterance]) -> Result<(Vec<ToyUtterance>, Vec<ToyUtterance>)> {
    let mut acoustic = Vec::with_capacity(data.len());
    let mut motion = Vec::with_capacity(data.len());
    for u in data {
        let (da, d) = (u.frames.acoustic_dim, u.frames.joint_dim());
        acoustic.push(u.select_channels(0, da, true)?);
        motion.push(u.select_channels(da, d, false)?);
    }
    Ok((acoustic, motion))
}

pub fn marginal_configs(joint: &ModelConfig) -> (ModelConfig, ModelConfig) {
    let acoustic = ModelConfig {
        motion_dim: 0,
        ..joint.clone()
    };
    let motion = ModelConfig {
        acoustic_dim: 0,
        ..joint.clone()
    };
    (acoustic, motion)
}

/// Trains the acoustic-only model, then the motion-only model on the
/// acoustic model's alignments. Motion frames carry no token identity, so
/// aligning them against their own means is degenerate.
pub fn marginal_baseline_train(
    data: &[ToyUtterance],
    joint: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(MarginalBaseline, Vec<MetricsRecord>, Vec<MetricsRecord>)> {
    if joint.acoustic_dim == 0 || joint.motion_dim == 0 {
        return Err(Error::Config("marginal baseline needs both modalities".into()));
    }
    let (da, dm) = split_dataset(data)?;
    let (ca, cm) = marginal_configs(joint);
    let seeds = Rng::new(cfg.seed, 0);
    let sa = seeds.named("marginal.acoustic").stream();
    let sm = seeds.named("marginal.motion").stream();
    let ta = TrainConfig { seed: sa, ..cfg.clone() };
    let tm = TrainConfig { seed: sm, ..cfg.clone() };
    let (acoustic, la) = train(&da, Model::new(ca, sa)?, &ta)?;
    let durations = align_dataset(&acoustic, &da)?;
    let mut trainer = Trainer::new(Model::new(cm, sm)?, tm)?.with_durations(durations);
    let lm = trainer.run(&dm, |_| {})?;
    let motion = trainer.model;
    Ok((MarginalBaseline { acoustic, motion }, la, lm))
}

impl MarginalBaseline {
    /// Samples both modalities with independent noise. Durations come from
    /// the acoustic model so the two streams stay frame-aligned.
    pub fn synthesize(&self, tokens: &[u32], cfg: &SamplerConfig, rng: &mut Rng) -> Result<Synthesis> {
        cfg.validate()?;
        let start = Instant::now();
        let (mu_a, durations) = condition(&self.acoustic, tokens, cfg)?;
        let mask = vec![true; tokens.len()];
        let enc_m = self.motion.encoder.encode(&self.motion.store, tokens, &mask)?;
        let mu_m = upsample_tensor(&enc_m.mu, &durations)?;
        let encoded = Instant::now();
        let a = solve_from(&self.acoustic, &mu_a, cfg, &mut rng.named("acoustic"))?;
        let m = solve_from(&self.motion, &mu_m, cfg, &mut rng.named("motion"))?;
        let solved = Instant::now();
        let sequence = JointFrameSequence::from_modalities(&a, &m, self.acoustic.config.frame_rate)?;
        Ok(Synthesis {
            sequence,
            durations,
            timing: Timing {
                encoder_seconds: (encoded - start).as_secs_f64(),
                solver_seconds: (solved - encoded).as_secs_f64(),
            },
        })
    }

    /// Output dims `(acoustic, motion)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.acoustic.config.acoustic_dim, self.motion.config.motion_dim)
    }
}
