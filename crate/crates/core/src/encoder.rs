//! Token encoder: embeddings, RoPE Transformer stack, a single linear head to
//! the joint acoustic+motion space, and a duration predictor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, Conv1d, LayerNorm, Linear, TransformerBlock};
use crate::tensor::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_mult: usize,
    /// Channels of the duration predictor's convolutions.
    pub duration_channels: usize,
    pub duration_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 192,
            depth: 3,
            heads: 4,
            head_dim: 64,
            ff_mult: 4,
            duration_channels: 192,
            duration_kernel: 3,
        }
    }
}

/// Per-token means and log-durations, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mu: Tensor,
    pub log_durations: Tensor,
    pub token_mask: Vec<bool>,
}

/// Recorded encoder outputs on a tape.
pub struct EncoderVars<'t> {
    pub mu: Var<'t>,
    pub log_durations: Var<'t>,
}

#[derive(Clone, Debug)]
struct DurationPredictor {
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    proj: Linear,
}

impl DurationPredictor {
    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
        let h = self.conv1.forward(tape, x.mask_rows(mask)?)?.relu();
        let h = self.norm1.forward(tape, h)?.mask_rows(mask)?;
        let h = self.conv2.forward(tape, h)?.relu();
        let h = self.norm2.forward(tape, h)?;
        let n = mask.len();
        self.proj.forward(tape, h)?.mask_rows(mask)?.reshape(vec![n])
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub joint_dim: usize,
    embedding: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head: Linear,
    duration: DurationPredictor,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        vocab_size: usize,
        joint_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if vocab_size == 0 || joint_dim == 0 || cfg.dim == 0 {
            return Err(Error::Config("encoder needs nonzero vocab, dim and output size".into()));
        }
        if cfg.duration_kernel % 2 == 0 {
            return Err(Error::Config("duration kernel must be odd".into()));
        }
        let embedding = store.add("encoder.embedding", Tensor::gaussian(rng, &[vocab_size, cfg.dim]));
        let attn = AttentionConfig {
            num_heads: cfg.heads,
            head_dim: cfg.head_dim,
            model_dim: cfg.dim,
        };
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("encoder.blocks.{i}"), attn.clone(), cfg.ff_mult, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", cfg.dim);
        let head = Linear::new(store, "encoder.mu_head", cfg.dim, joint_dim, rng);
        let (fc, k) = (cfg.duration_channels, cfg.duration_kernel);
        let duration = DurationPredictor {
            conv1: Conv1d::new(store, "encoder.duration.conv1", cfg.dim, fc, k, 1, k / 2, rng),
            norm1: LayerNorm::new(store, "encoder.duration.norm1", fc),
            conv2: Conv1d::new(store, "encoder.duration.conv2", fc, fc, k, 1, k / 2, rng),
            norm2: LayerNorm::new(store, "encoder.duration.norm2", fc),
            proj: Linear::new(store, "encoder.duration.proj", fc, 1, rng),
        };
        Ok(Self {
            vocab_size,
            joint_dim,
            embedding,
            blocks,
            norm,
            head,
            duration,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, tokens: &[u32], mask: &[bool]) -> Result<EncoderVars<'t>> {
        if tokens.is_empty() || tokens.len() != mask.len() {
            return Err(Error::invalid(format!(
                "encoder needs a non-empty token sequence with a matching mask ({} tokens, {} mask)",
                tokens.len(),
                mask.len()
            )));
        }
        let idx = tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.vocab_size {
                    Ok(Some(t as usize))
                } else {
                    Err(Error::invalid(format!(
                        "unknown token id {t} (vocabulary size {})",
                        self.vocab_size
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut h = tape.param(self.embedding).gather_rows(idx)?.mask_rows(mask)?;
        for block in &self.blocks {
            h = block.forward(tape, h, None, mask, Some(&positions))?.mask_rows(mask)?;
        }
        let h = self.norm.forward(tape, h)?.mask_rows(mask)?;
        let mu = self.head.forward(tape, h)?.mask_rows(mask)?;
        let log_durations = self.duration.forward(tape, h.detach(), mask)?;
        Ok(EncoderVars { mu, log_durations })
    }

    /// Gradient-free forward pass.
    pub fn encode(&self, store: &ParamStore, tokens: &[u32], mask: &[bool]) -> Result<EncoderOutput> {
        let tape = Tape::inference(store);
        let out = self.forward(&tape, tokens, mask)?;
        Ok(EncoderOutput {
            mu: out.mu.value(),
            log_durations: out.log_durations.value(),
            token_mask: mask.to_vec(),
        })
    }
}
