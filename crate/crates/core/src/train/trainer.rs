use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{duration_loss, otcfm_loss, prior_loss, score_matching_loss};
use super::optim::{clip_grad_norm, Adam, AdamConfig, Precision};
use crate::align::{mas_align, upsample};
use crate::data::ToyUtterance;
use crate::error::{Error, Result};
use crate::model::{Model, Regime};
use crate::tensor::{Gradients, Rng, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Total number of updates; a resumed run continues up to this count.
    pub updates: u64,
    pub prior_weight: f64,
    pub duration_weight: f64,
    pub seed: u64,
    pub log_interval: u64,
    pub grad_clip: f64,
    pub precision: Precision,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            updates: 1000,
            prior_weight: 1.0,
            duration_weight: 1.0,
            seed: 0,
            log_interval: 100,
            grad_clip: 1.0,
            precision: Precision::F64,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be positive".into()));
        }
        if self.prior_weight < 0.0 || self.duration_weight < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("loss weights and grad_clip must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Batch-mean loss components of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub regime: f64,
    pub prior: f64,
    pub duration: f64,
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update: u64,
    pub loss_total: f64,
    pub loss_cfm_or_sm: f64,
    pub loss_prior: f64,
    pub loss_dur: f64,
    pub seconds_elapsed: f64,
}

struct SequenceResult {
    grads: Gradients,
    losses: StepLosses,
}

fn finite(name: &str, v: f64, update: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{name} loss is {v} at update {update}")))
    }
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: Adam,
    /// Updates completed so far.
    pub update: u64,
    epoch_cache: Option<(u64, Vec<usize>)>,
    /// Per-utterance durations used instead of alignment search.
    fixed_durations: Option<Vec<Vec<usize>>>,
    started: Instant,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        let optimizer = Adam::new(config.adam.clone(), &model.store);
        Self::resume(model, config, optimizer, 0)
    }

    /// Continues from saved optimizer state after `update` updates.
    pub fn resume(model: Model, config: TrainConfig, optimizer: Adam, update: u64) -> Result<Self> {
        config.validate()?;
        model.config.validate()?;
        if optimizer.m.len() != model.store.len() {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        Ok(Self {
            model,
            config,
            optimizer,
            update,
            epoch_cache: None,
            fixed_durations: None,
            started: Instant::now(),
        })
    }

    /// Trains on the given durations, indexed like the dataset, instead of
    /// aligning each utterance against the model's own means.
    pub fn with_durations(mut self, durations: Vec<Vec<usize>>) -> Self {
        self.fixed_durations = Some(durations);
        self
    }

    fn check_data(&self, data: &[ToyUtterance]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("training needs a non-empty dataset"));
        }
        if let Some(fixed) = &self.fixed_durations {
            if fixed.len() != data.len() {
                return Err(Error::invalid(format!(
                    "{} duration lists for {} utterances",
                    fixed.len(),
                    data.len()
                )));
            }
            for (i, (d, u)) in fixed.iter().zip(data).enumerate() {
                let valid = u.frames.mask.iter().filter(|&&m| m).count();
                if d.len() != u.tokens.len() || d.iter().any(|&v| v == 0) || d.iter().sum::<usize>() != valid {
                    return Err(Error::invalid(format!(
                        "durations of utterance {i} do not cover its {} tokens and {valid} frames",
                        u.tokens.len()
                    )));
                }
            }
        }
        let cfg = &self.model.config;
        for (i, u) in data.iter().enumerate() {
            if u.frames.acoustic_dim != cfg.acoustic_dim || u.frames.motion_dim != cfg.motion_dim {
                return Err(Error::invalid(format!(
                    "utterance {i} has dims {}+{}, model expects {}+{}",
                    u.frames.acoustic_dim, u.frames.motion_dim, cfg.acoustic_dim, cfg.motion_dim
                )));
            }
        }
        Ok(())
    }

    /// Dataset indices of the sequences in update `update` (0-based).
    fn batch(&mut self, update: u64, n: usize) -> Vec<usize> {
        let b = self.config.batch_size as u64;
        (0..b)
            .map(|j| {
                let pos = update * b + j;
                let epoch = pos / n as u64;
                if self.epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut p: Vec<usize> = (0..n).collect();
                    Rng::new(self.config.seed, 0).named("epoch").child(epoch).shuffle(&mut p);
                    self.epoch_cache = Some((epoch, p));
                }
                let perm = &self.epoch_cache.as_ref().expect("epoch permutation").1;
                perm[(pos % n as u64) as usize]
            })
            .collect()
    }

    fn sequence(&self, i: usize, utt: &ToyUtterance, rng: &mut Rng, scale: f64) -> Result<SequenceResult> {
        let model = &self.model;
        let cfg = &self.config;
        let tape = Tape::new(&model.store);
        let token_mask = vec![true; utt.tokens.len()];
        let enc = model.encoder.forward(&tape, &utt.tokens, &token_mask)?;
        let durations = match &self.fixed_durations {
            Some(fixed) => fixed[i].clone(),
            None => mas_align(&enc.mu.value(), &utt.frames.frames, &token_mask, &utt.frames.mask)?.durations,
        };
        let mu_frames = upsample(enc.mu, &durations)?;
        let regime = match model.config.regime {
            Regime::Otcfm => otcfm_loss(&tape, &utt.frames, mu_frames, &model.decoder, &model.config.otcfm, rng)?,
            Regime::ScoreMatching => score_matching_loss(
                &tape,
                &utt.frames,
                mu_frames,
                &model.decoder,
                &model.config.score_matching,
                rng,
            )?,
        };
        let prior = prior_loss(mu_frames, &utt.frames.frames, &utt.frames.mask)?;
        let duration = duration_loss(enc.log_durations, &durations, &token_mask)?;
        let losses = StepLosses {
            regime: finite(&model.config.regime.to_string(), regime.value().item(), self.update)?,
            prior: finite("prior", prior.value().item(), self.update)?,
            duration: finite("duration", duration.value().item(), self.update)?,
            total: 0.0,
        };
        let total = regime
            .add(prior.scale(cfg.prior_weight))?
            .add(duration.scale(cfg.duration_weight))?;
        let losses = StepLosses {
            total: total.value().item(),
            ..losses
        };
        let grads = tape.backward(total.scale(scale))?;
        Ok(SequenceResult { grads, losses })
    }

    /// Runs one update and returns its batch-mean losses.
    pub fn step(&mut self, data: &[ToyUtterance]) -> Result<StepLosses> {
        self.check_data(data)?;
        let idx = self.batch(self.update, data.len());
        let noise = Rng::new(self.config.seed, 0).named("noise").child(self.update);
        let scale = 1.0 / idx.len() as f64;
        let this = &*self;
        let results = idx
            .par_iter()
            .enumerate()
            .map(|(j, &i)| this.sequence(i, &data[i], &mut noise.child(j as u64), scale))
            .collect::<Result<Vec<_>>>()?;

        let mut mean = StepLosses::default();
        let store = &mut self.model.store;
        store.zero_grad();
        for r in &results {
            store.accumulate(&r.grads);
            mean.total += r.losses.total * scale;
            mean.regime += r.losses.regime * scale;
            mean.prior += r.losses.prior * scale;
            mean.duration += r.losses.duration * scale;
        }
        let norm = clip_grad_norm(store, self.config.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "gradient norm is {norm} at update {}",
                self.update
            )));
        }
        self.optimizer
            .update(store, self.config.learning_rate, self.config.precision)?;
        self.update += 1;
        Ok(mean)
    }

    /// Trains until `config.updates`, calling `log` for every metrics record.
    pub fn run(&mut self, data: &[ToyUtterance], mut log: impl FnMut(&MetricsRecord)) -> Result<Vec<MetricsRecord>> {
        self.check_data(data)?;
        let mut records = Vec::new();
        while self.update < self.config.updates {
            let l = self.step(data)?;
            if self.update % self.config.log_interval == 0 || self.update == self.config.updates {
                let rec = MetricsRecord {
                    update: self.update,
                    loss_total: l.total,
                    loss_cfm_or_sm: l.regime,
                    loss_prior: l.prior,
                    loss_dur: l.duration,
                    seconds_elapsed: self.started.elapsed().as_secs_f64(),
                };
                log(&rec);
                records.push(rec);
            }
        }
        Ok(records)
    }
}

/// Trains `model` on `data` for `cfg.updates` updates.
pub fn train(data: &[ToyUtterance], model: Model, cfg: &TrainConfig) -> Result<(Model, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let records = trainer.run(data, |_| {})?;
    Ok((trainer.model, records))
}

/// Alignment-search durations of every utterance under `model`'s encoder.
pub fn align_dataset(model: &Model, data: &[ToyUtterance]) -> Result<Vec<Vec<usize>>> {
    data.par_iter()
        .map(|u| {
            let token_mask = vec![true; u.tokens.len()];
            let enc = model.encoder.encode(&model.store, &u.tokens, &token_mask)?;
            Ok(mas_align(&enc.mu, &u.frames.frames, &token_mask, &u.frames.mask)?.durations)
        })
        .collect()
}
