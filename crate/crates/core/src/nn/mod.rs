//! Neural building blocks shared by the encoder and the flow decoder.
//!
//! Blocks own [`ParamId`]s into a [`ParamStore`]; forward passes read the
//! parameter snapshot held by the [`Tape`].

mod attention;
mod timestep;
mod transformer;

pub use attention::{AttentionConfig, MultiHeadAttention};
pub use timestep::{sinusoidal_features, TimestepEmbedding};
pub use transformer::{FeedForward, TransformerBlock};

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub(crate) fn fan_in_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(rng, shape, -bound, bound)
}

/// Affine map `x·W + b` applied to each row of a `T×in` input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[in_dim, out_dim], in_dim),
        );
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(rng, &[out_dim], in_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(tape.param(self.weight))?.add_row(tape.param(self.bias))
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.weight, self.bias] {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(tape.param(self.gain), tape.param(self.bias), Self::EPS)
    }
}

/// Periodic activation `x + sin²(αx)/(β+ε)` with per-channel `α`, `β` kept
/// in the log domain.
#[derive(Clone, Debug)]
pub struct SnakeBeta {
    pub log_alpha: ParamId,
    pub log_beta: ParamId,
}

impl SnakeBeta {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            log_alpha: store.add(format!("{name}.log_alpha"), Tensor::zeros(&[channels])),
            log_beta: store.add(format!("{name}.log_beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.snakebeta(tape.param(self.log_alpha), tape.param(self.log_beta))
    }
}

/// Time-major 1-D convolution layer with bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        width: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * width;
        Self {
            kernel: store.add(
                format!("{name}.kernel"),
                fan_in_uniform(rng, &[out_ch, in_ch, width], fan_in),
            ),
            bias: store.add(format!("{name}.bias"), fan_in_uniform(rng, &[out_ch], fan_in)),
            stride,
            padding,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.conv1d(tape.param(self.kernel), self.stride, self.padding)?
            .add_row(tape.param(self.bias))
    }
}
