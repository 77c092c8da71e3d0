use super::Linear;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Rng, Tape, Tensor, Var};

/// Scale applied to `t ∈ [0, 1]` before the sinusoids.
const TIME_SCALE: f64 = 1000.0;

/// `[sin(s·t·f_0) … sin(s·t·f_{h-1}), cos(s·t·f_0) … cos(s·t·f_{h-1})]` with
/// `f_k = 10000^(-k/(h-1))` geometrically spaced and `h = dim/2`.
pub fn sinusoidal_features(t: f64, dim: usize) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("timestep {t} outside [0, 1]")));
    }
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::invalid(format!("timestep embedding dim {dim} must be even and >= 2")));
    }
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / denom).exp();
        let arg = TIME_SCALE * t * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Ok(Tensor::vector(out))
}

/// Sinusoidal features followed by `Linear → SiLU → Linear`.
#[derive(Clone, Debug)]
pub struct TimestepEmbedding {
    pub dim: usize,
    pub first: Linear,
    pub second: Linear,
}

impl TimestepEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Self {
        Self {
            dim,
            first: Linear::new(store, &format!("{name}.first"), dim, dim, rng),
            second: Linear::new(store, &format!("{name}.second"), dim, dim, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, t: f64) -> Result<Var<'t>> {
        let raw = sinusoidal_features(t, self.dim)?.reshape(vec![1, self.dim])?;
        let h = self.first.forward(tape, tape.constant(raw))?.silu();
        self.second.forward(tape, h)?.reshape(vec![self.dim])
    }
}
