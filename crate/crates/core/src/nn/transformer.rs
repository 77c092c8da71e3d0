use super::{AttentionConfig, LayerNorm, Linear, MultiHeadAttention, SnakeBeta};
use crate::error::Result;
use crate::tensor::{ParamStore, Rng, Tape, Var};

/// Position-wise `Linear → snakebeta → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Linear,
    pub activation: SnakeBeta,
    pub contract: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, mult: usize, rng: &mut Rng) -> Self {
        let hidden = dim * mult.max(1);
        Self {
            expand: Linear::new(store, &format!("{name}.expand"), dim, hidden, rng),
            activation: SnakeBeta::new(store, &format!("{name}.act"), hidden),
            contract: Linear::new(store, &format!("{name}.contract"), hidden, dim, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.expand.forward(tape, x)?;
        let h = self.activation.forward(tape, h)?;
        self.contract.forward(tape, h)
    }
}

/// Pre-norm residual Transformer block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn_norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        attention: AttentionConfig,
        ff_mult: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = attention.model_dim;
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), attention, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ff_mult, rng),
        })
    }

    /// `t_emb` (length `D`) is added to every frame before the block.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        t_emb: Option<Var<'t>>,
        mask: &[bool],
        positions: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        let x = match t_emb {
            Some(e) => x.add_row(e)?,
            None => x,
        };
        let h = self.attn_norm.forward(tape, x)?;
        let x = x.add(self.attention.forward(tape, h, mask, positions)?)?;
        let h = self.ffn_norm.forward(tape, x)?;
        x.add(self.ffn.forward(tape, h)?)
    }

    /// Zeroes both residual-branch output projections.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        self.attention.output.zero(store);
        self.ffn.contract.zero(store);
    }
}
