//! The flow-prediction network: a 1-D convolutional U-Net with a Transformer
//! after the convolution in every stage.
//!
//! Input is `[x_t ‖ mu]` concatenated on the channel axis. There is no
//! positional table; time positions are implicit in the conditioning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, Conv1d, LayerNorm, Linear, SnakeBeta, TimestepEmbedding, TransformerBlock};
use crate::tensor::{Axis, ParamStore, Rng, Tape, Tensor, Var};

/// Temporal length granularity imposed by the two stride-2 stages.
fn granularity(stages: usize) -> usize {
    1 << stages
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub down_dims: Vec<usize>,
    pub mid_dims: Vec<usize>,
    pub up_dims: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_mult: usize,
    pub time_dim: usize,
    pub kernel: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            down_dims: vec![256, 512],
            mid_dims: vec![512, 512],
            up_dims: vec![512, 256],
            heads: 4,
            head_dim: 64,
            ff_mult: 4,
            time_dim: 256,
            kernel: 3,
        }
    }
}

impl UNetConfig {
    /// Every width divided by 8, for fast experiments.
    pub fn desk() -> Self {
        Self {
            down_dims: vec![32, 64],
            mid_dims: vec![64, 64],
            up_dims: vec![64, 32],
            heads: 4,
            head_dim: 8,
            ff_mult: 4,
            time_dim: 32,
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.down_dims.is_empty() || self.down_dims.len() != self.up_dims.len() {
            return Err(Error::Config(format!(
                "down and up schedules must be non-empty and of equal length, got {:?} and {:?}",
                self.down_dims, self.up_dims
            )));
        }
        let all = self.down_dims.iter().chain(&self.mid_dims).chain(&self.up_dims);
        if all.clone().any(|&d| d == 0) || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("U-Net widths, heads and head_dim must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("U-Net kernel width must be odd".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        Ok(())
    }
}

/// `conv → norm → snakebeta → conv → norm → snakebeta` plus a residual
/// projection.
#[derive(Clone, Debug)]
struct ResConvBlock {
    conv1: Conv1d,
    norm1: LayerNorm,
    act1: SnakeBeta,
    conv2: Conv1d,
    norm2: LayerNorm,
    act2: SnakeBeta,
    residual: Option<Linear>,
}

impl ResConvBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), c_in, c_out, k, 1, k / 2, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c_out),
            act1: SnakeBeta::new(store, &format!("{name}.act1"), c_out),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), c_out, c_out, k, 1, k / 2, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c_out),
            act2: SnakeBeta::new(store, &format!("{name}.act2"), c_out),
            residual: (c_in != c_out).then(|| Linear::new(store, &format!("{name}.residual"), c_in, c_out, rng)),
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.act1.forward(tape, self.norm1.forward(tape, h)?)?.mask_rows(mask)?;
        let h = self.conv2.forward(tape, h)?;
        let h = self.act2.forward(tape, self.norm2.forward(tape, h)?)?;
        let skip = match &self.residual {
            Some(p) => p.forward(tape, x)?,
            None => x,
        };
        h.add(skip)?.mask_rows(mask)
    }
}

/// A resolution stage: conv block, time conditioning, Transformer.
#[derive(Clone, Debug)]
struct Stage {
    conv: ResConvBlock,
    time: Linear,
    transformer: TransformerBlock,
}

impl Stage {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, cfg: &UNetConfig, rng: &mut Rng) -> Result<Self> {
        let attn = AttentionConfig {
            num_heads: cfg.heads,
            head_dim: cfg.head_dim,
            model_dim: c_out,
        };
        Ok(Self {
            conv: ResConvBlock::new(store, &format!("{name}.conv"), c_in, c_out, cfg.kernel, rng),
            time: Linear::new(store, &format!("{name}.time"), cfg.time_dim, c_out, rng),
            transformer: TransformerBlock::new(store, &format!("{name}.transformer"), attn, cfg.ff_mult, rng)?,
        })
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, t_emb: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
        let h = self.conv.forward(tape, x, mask)?;
        let n = self.time.in_dim;
        let te = self.time.forward(tape, t_emb.reshape(vec![1, n])?)?;
        let te = te.reshape(vec![self.time.out_dim])?;
        self.transformer.forward(tape, h, Some(te), mask, None)?.mask_rows(mask)
    }
}

#[derive(Clone, Debug)]
pub struct FlowDecoder {
    pub config: UNetConfig,
    pub joint_dim: usize,
    time_embed: TimestepEmbedding,
    down: Vec<(Stage, Conv1d)>,
    mid: Vec<Stage>,
    up: Vec<(Conv1d, Stage)>,
    final_norm: LayerNorm,
    proj: Linear,
}

fn downsample_mask(mask: &[bool]) -> Vec<bool> {
    mask.iter().step_by(2).copied().collect()
}

impl FlowDecoder {
    pub fn new(store: &mut ParamStore, cfg: &UNetConfig, joint_dim: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if joint_dim == 0 {
            return Err(Error::Config("decoder output dimension must be positive".into()));
        }
        let k = cfg.kernel;
        let time_embed = TimestepEmbedding::new(store, "decoder.time_embed", cfg.time_dim, rng);
        let mut c = 2 * joint_dim;
        let mut down = Vec::new();
        for (i, &d) in cfg.down_dims.iter().enumerate() {
            let stage = Stage::new(store, &format!("decoder.down.{i}"), c, d, cfg, rng)?;
            let conv = Conv1d::new(store, &format!("decoder.down.{i}.downsample"), d, d, k, 2, k / 2, rng);
            down.push((stage, conv));
            c = d;
        }
        let mut mid = Vec::new();
        for (i, &d) in cfg.mid_dims.iter().enumerate() {
            mid.push(Stage::new(store, &format!("decoder.mid.{i}"), c, d, cfg, rng)?);
            c = d;
        }
        let mut up = Vec::new();
        for (i, &d) in cfg.up_dims.iter().enumerate() {
            let skip = cfg.down_dims[cfg.down_dims.len() - 1 - i];
            let conv = Conv1d::new(store, &format!("decoder.up.{i}.upsample"), c, c, k, 1, k / 2, rng);
            let stage = Stage::new(store, &format!("decoder.up.{i}"), c + skip, d, cfg, rng)?;
            up.push((conv, stage));
            c = d;
        }
        let final_norm = LayerNorm::new(store, "decoder.final_norm", c);
        let proj = Linear::new(store, "decoder.proj", c, joint_dim, rng);
        Ok(Self {
            config: cfg.clone(),
            joint_dim,
            time_embed,
            down,
            mid,
            up,
            final_norm,
            proj,
        })
    }

    /// Vector-field value at `(x_t, t)` conditioned on frame-rate `mu`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x_t: Var<'t>,
        t: f64,
        mu: Var<'t>,
        mask: &[bool],
    ) -> Result<Var<'t>> {
        let (xs, ms) = (x_t.shape(), mu.shape());
        if xs != ms || xs.len() != 2 || xs[1] != self.joint_dim || mask.len() != xs[0] {
            return Err(Error::shape("vector_field", &xs, &ms));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("vector_field needs at least one valid frame"));
        }
        let t_len = xs[0];
        let g = granularity(self.down.len());
        let padded = t_len.div_ceil(g) * g;
        let mut mask_p = mask.to_vec();
        mask_p.resize(padded, false);

        let mut h = Var::concat(&[x_t, mu], Axis::Cols)?;
        if padded != t_len {
            let idx = (0..padded).map(|i| (i < t_len).then_some(i)).collect();
            h = h.gather_rows(idx)?;
        }
        h = h.mask_rows(&mask_p)?;

        let t_emb = self.time_embed.forward(tape, t)?;
        let mut masks = vec![mask_p];
        let mut skips = Vec::new();
        for (stage, downsample) in &self.down {
            let m = masks.last().unwrap().clone();
            h = stage.forward(tape, h, t_emb, &m)?;
            skips.push(h);
            let m_low = downsample_mask(&m);
            h = downsample.forward(tape, h)?.mask_rows(&m_low)?;
            masks.push(m_low);
        }
        let m = masks.last().unwrap().clone();
        for stage in &self.mid {
            h = stage.forward(tape, h, t_emb, &m)?;
        }
        for (upsample, stage) in &self.up {
            masks.pop();
            let m = masks.last().unwrap().clone();
            let idx = (0..m.len()).map(|i| Some(i / 2)).collect();
            h = h.gather_rows(idx)?.mask_rows(&m)?;
            h = upsample.forward(tape, h)?.mask_rows(&m)?;
            let skip = skips.pop().unwrap();
            h = Var::concat(&[h, skip], Axis::Cols)?;
            h = stage.forward(tape, h, t_emb, &m)?;
        }
        let h = self.final_norm.forward(tape, h)?;
        let mut out = self.proj.forward(tape, h)?;
        if padded != t_len {
            out = out.slice(Axis::Rows, 0, t_len)?;
        }
        out.mask_rows(mask)
    }

    /// Gradient-free evaluation on plain tensors.
    pub fn evaluate(&self, store: &ParamStore, x_t: &Tensor, t: f64, mu: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let tape = Tape::inference(store);
        let out = self.forward(&tape, tape.constant(x_t.clone()), t, tape.constant(mu.clone()), mask)?;
        Ok(out.value())
    }
}
