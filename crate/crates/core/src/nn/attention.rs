use serde::{Deserialize, Serialize};

use super::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Axis, ParamStore, Rng, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize) -> Self {
        Self {
            num_heads: 4,
            head_dim: 64,
            model_dim,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!("invalid attention config {self:?}")));
        }
        Ok(())
    }
}

/// Multi-head self-attention with optional rotary embedding on queries and keys.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub config: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, config: AttentionConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, inner) = (config.model_dim, config.inner_dim());
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d, inner, rng),
            key: Linear::new(store, &format!("{name}.key"), d, inner, rng),
            value: Linear::new(store, &format!("{name}.value"), d, inner, rng),
            output: Linear::new(store, &format!("{name}.output"), inner, d, rng),
            config,
        })
    }

    /// `x` is `T×D`; `mask[t] == false` marks padded key positions.
    /// `positions` enables rotary embedding when given.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        mask: &[bool],
        positions: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.config.model_dim || mask.len() != shape[0] {
            return Err(Error::shape("attention", &shape, &[mask.len(), self.config.model_dim]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("attention mask has no valid positions"));
        }
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let dh = self.config.head_dim;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let mut qh = q.slice(Axis::Cols, h * dh, (h + 1) * dh)?;
            let mut kh = k.slice(Axis::Cols, h * dh, (h + 1) * dh)?;
            let vh = v.slice(Axis::Cols, h * dh, (h + 1) * dh)?;
            if let Some(pos) = positions {
                qh = qh.rope(pos)?;
                kh = kh.rope(pos)?;
            }
            let weights = qh.matmul_nt(kh)?.scale(scale).softmax_rows(Some(mask))?;
            heads.push(weights.matmul(vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat(&heads, Axis::Cols)?
        };
        self.output.forward(tape, merged)
    }
}
