//! Euler ODE synthesis from Gaussian noise.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::align::{durations_from_log, upsample_tensor};
use crate::error::{Error, Result};
use crate::model::{Model, Regime};
use crate::sequence::JointFrameSequence;
use crate::tensor::{Rng, Tensor};
use crate::train::{score_from_output, SM_T_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Euler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    /// Standard deviation of the initial noise.
    pub temperature: f64,
    pub solver: Solver,
    /// Multiplier on predicted durations.
    pub duration_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            temperature: 1.0,
            solver: Solver::Euler,
            duration_scale: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn with_steps(n_steps: usize) -> Self {
        Self {
            n_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be finite and >= 0", self.temperature)));
        }
        if !(self.duration_scale > 0.0) {
            return Err(Error::Config("duration_scale must be positive".into()));
        }
        Ok(())
    }
}

/// A time-dependent vector field `v(x, t, mu)` on `t ∈ [0, 1]`.
pub trait Field {
    fn eval(&self, x: &Tensor, t: f64, mu: &Tensor) -> Result<Tensor>;
}

impl<F> Field for F
where
    F: Fn(&Tensor, f64, &Tensor) -> Result<Tensor>,
{
    fn eval(&self, x: &Tensor, t: f64, mu: &Tensor) -> Result<Tensor> {
        self(x, t, mu)
    }
}

/// Left-endpoint Euler on the grid `t_i = i/n`, returning the state at `t = 1`.
pub fn euler_solve<F: Field + ?Sized>(field: &F, x0: &Tensor, mu: &Tensor, cfg: &SamplerConfig) -> Result<Tensor> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let h = 1.0 / n as f64;
    let mut x = x0.clone();
    for i in 0..n {
        let v = field.eval(&x, i as f64 / n as f64, mu)?;
        if v.shape() != x.shape() {
            return Err(Error::shape("euler_solve field", x.shape(), v.shape()));
        }
        let data = x.data_mut();
        for (a, b) in data.iter_mut().zip(v.data()) {
            *a += h * b;
        }
        if !x.is_finite() {
            return Err(Error::Numerical(format!("non-finite state after Euler step {}", i + 1)));
        }
    }
    Ok(x)
}

/// The sampling field of a trained model: the decoder output itself for
/// OT-CFM, and the probability-flow drift for score matching, reparameterized
/// so the solver runs from diffusion time 1 down to `SM_T_EPS`.
pub struct ModelField<'a> {
    pub model: &'a Model,
    pub mask: Vec<bool>,
}

impl Field for ModelField<'_> {
    fn eval(&self, x: &Tensor, t: f64, mu: &Tensor) -> Result<Tensor> {
        let m = self.model;
        match m.config.regime {
            Regime::Otcfm => m.decoder.evaluate(&m.store, x, t, mu, &self.mask),
            Regime::ScoreMatching => {
                let sm = &m.config.score_matching;
                let span = 1.0 - SM_T_EPS;
                let s = 1.0 - t * span;
                let out = m.decoder.evaluate(&m.store, x, s, mu, &self.mask)?;
                let score = score_from_output(&out, sm, s);
                let c = span * 0.5 * sm.beta(s);
                x.zip_map(&score, |xi, si| c * (xi + si))
            }
        }
    }
}

/// Wall-clock split of one synthesis call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Encoding, duration prediction and upsampling.
    pub encoder_seconds: f64,
    pub solver_seconds: f64,
}

impl Timing {
    pub fn total(&self) -> f64 {
        self.encoder_seconds + self.solver_seconds
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub sequence: JointFrameSequence,
    pub durations: Vec<usize>,
    pub timing: Timing,
}

/// Encoder conditioning for `tokens`: upsampled means and their durations.
pub fn condition(model: &Model, tokens: &[u32], cfg: &SamplerConfig) -> Result<(Tensor, Vec<usize>)> {
    if tokens.is_empty() {
        return Err(Error::invalid("cannot synthesize an empty token sequence"));
    }
    let mask = vec![true; tokens.len()];
    let enc = model.encoder.encode(&model.store, tokens, &mask)?;
    let durations = durations_from_log(enc.log_durations.data(), cfg.duration_scale, &mask);
    let mu = upsample_tensor(&enc.mu, &durations)?;
    Ok((mu, durations))
}

/// Solves from `temperature · N(0, I)` noise given upsampled means.
pub fn solve_from(model: &Model, mu: &Tensor, cfg: &SamplerConfig, rng: &mut Rng) -> Result<Tensor> {
    let x0 = Tensor::gaussian(rng, mu.shape()).scale(cfg.temperature);
    let field = ModelField {
        model,
        mask: vec![true; mu.rows()],
    };
    euler_solve(&field, &x0, mu, cfg)
}

/// Text to joint acoustic+motion frames.
pub fn synthesize(tokens: &[u32], model: &Model, cfg: &SamplerConfig, rng: &mut Rng) -> Result<Synthesis> {
    cfg.validate()?;
    let start = Instant::now();
    let (mu, durations) = condition(model, tokens, cfg)?;
    let encoded = Instant::now();
    let x = solve_from(model, &mu, cfg, rng)?;
    let solved = Instant::now();
    let c = &model.config;
    let sequence = JointFrameSequence::new(x, c.acoustic_dim, c.motion_dim, c.frame_rate)?;
    Ok(Synthesis {
        sequence,
        durations,
        timing: Timing {
            encoder_seconds: (encoded - start).as_secs_f64(),
            solver_seconds: (solved - encoded).as_secs_f64(),
        },
    })
}
