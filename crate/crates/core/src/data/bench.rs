use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::sampler::{condition, solve_from, SamplerConfig};
use crate::tensor::Rng;

/// Timing of one sampler configuration over a set of utterances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfRow {
    pub n_steps: usize,
    pub encoder_seconds: f64,
    pub solver_seconds: f64,
    /// Seconds of output at the model frame rate.
    pub output_seconds: f64,
    /// Whole-pipeline wall time over output duration.
    pub rtf: f64,
    pub solver_rtf: f64,
}

/// Times synthesis of `utterances` under each config. Every config solves
/// the same conditioning from the same initial noise; each measurement is
/// the fastest of `repeats` runs, with repeats cycling through all configs.
pub fn benchmark_rtf(
    model: &Model,
    configs: &[SamplerConfig],
    utterances: &[Vec<u32>],
    repeats: usize,
    rng: &Rng,
) -> Result<Vec<RtfRow>> {
    if utterances.is_empty() {
        return Err(Error::invalid("benchmark needs at least one utterance"));
    }
    let repeats = repeats.max(1);
    for cfg in configs {
        cfg.validate()?;
    }
    let mut best = vec![vec![(f64::INFINITY, f64::INFINITY); utterances.len()]; configs.len()];
    let mut frames = vec![0usize; utterances.len()];
    for _ in 0..repeats {
        for (c, cfg) in configs.iter().enumerate() {
            for (i, tokens) in utterances.iter().enumerate() {
                let t0 = Instant::now();
                let (mu, _) = condition(model, tokens, cfg)?;
                let t1 = Instant::now();
                solve_from(model, &mu, cfg, &mut rng.child(i as u64))?;
                let t2 = Instant::now();
                let b = &mut best[c][i];
                b.0 = b.0.min((t1 - t0).as_secs_f64());
                b.1 = b.1.min((t2 - t1).as_secs_f64());
                frames[i] = mu.rows();
            }
        }
    }
    let output_seconds = frames.iter().sum::<usize>() as f64 / model.config.frame_rate;
    let rows = configs
        .iter()
        .zip(&best)
        .map(|(cfg, b)| {
            let encoder_seconds: f64 = b.iter().map(|x| x.0).sum();
            let solver_seconds: f64 = b.iter().map(|x| x.1).sum();
            RtfRow {
                n_steps: cfg.n_steps,
                encoder_seconds,
                solver_seconds,
                output_seconds,
                rtf: (encoder_seconds + solver_seconds) / output_seconds,
                solver_rtf: solver_seconds / output_seconds,
            }
        })
        .collect();
    Ok(rows)
}
