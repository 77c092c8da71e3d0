use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{JointFrameSequence, DEFAULT_FRAME_RATE};
use crate::tensor::{Rng, Tensor};

const MAGIC: &[u8; 4] = b"MMTC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub vocab_size: usize,
    pub acoustic_dim: usize,
    pub motion_dim: usize,
    pub cross_modal_rho: f64,
    pub n_utterances: usize,
    /// Tokens per utterance, inclusive range.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Range of per-token base durations in frames.
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_std: f64,
    /// Scale of the token-specific acoustic offsets.
    pub offset_scale: f64,
    pub frame_rate: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            acoustic_dim: 8,
            motion_dim: 5,
            cross_modal_rho: 0.8,
            n_utterances: 2000,
            min_tokens: 6,
            max_tokens: 12,
            min_duration: 2,
            max_duration: 4,
            noise_std: 0.05,
            offset_scale: 1.0,
            frame_rate: DEFAULT_FRAME_RATE,
            seed: 0,
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 || self.vocab_size > u32::MAX as usize {
            return bad("vocab_size must be positive");
        }
        if self.acoustic_dim == 0 || self.motion_dim == 0 {
            return bad("acoustic_dim and motion_dim must be at least 1");
        }
        if !(self.cross_modal_rho.abs() <= 1.0) {
            return bad("cross_modal_rho must lie in [-1, 1]");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token range must satisfy 1 <= min_tokens <= max_tokens");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("duration range must satisfy 1 <= min_duration <= max_duration");
        }
        if !(self.noise_std >= 0.0) || !(self.offset_scale >= 0.0) {
            return bad("noise_std and offset_scale must be nonnegative");
        }
        if !(self.frame_rate > 0.0) {
            return bad("frame_rate must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub tokens: Vec<u32>,
    pub frames: JointFrameSequence,
    /// Shared latent process, one value per frame.
    pub latent: Tensor,
}

impl ToyUtterance {
    /// Keeps the channel range `[start, end)` as a single-modality utterance.
    pub fn select_channels(&self, start: usize, end: usize, acoustic: bool) -> Result<ToyUtterance> {
        let frames = self.frames.frames.slice_cols(start, end);
        let d = end - start;
        let (a, m) = if acoustic { (d, 0) } else { (0, d) };
        Ok(ToyUtterance {
            tokens: self.tokens.clone(),
            frames: JointFrameSequence::with_mask(frames, a, m, self.frames.mask.clone(), self.frames.frame_rate)?,
            latent: self.latent.clone(),
        })
    }
}

/// Per-token generative parameters.
#[derive(Clone, Debug)]
struct TokenShape {
    duration: usize,
    amplitude: f64,
    frequency: f64,
    offset: Vec<f64>,
}

struct Structure {
    tokens: Vec<TokenShape>,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn structure(cfg: &ToyCorpusConfig, rng: &Rng) -> Structure {
    let mut r = rng.named("structure");
    let a: Vec<f64> = (0..cfg.acoustic_dim).map(|_| r.normal()).collect();
    let b: Vec<f64> = (0..cfg.motion_dim).map(|_| r.normal()).collect();
    let aa: f64 = a.iter().map(|v| v * v).sum();
    let tokens = (0..cfg.vocab_size)
        .map(|_| {
            let duration = cfg.min_duration + r.below(cfg.max_duration - cfg.min_duration + 1);
            let amplitude = 0.6 + 0.8 * r.uniform();
            let frequency = 0.5 + r.uniform();
            let raw: Vec<f64> = (0..cfg.acoustic_dim).map(|_| r.normal()).collect();
            let proj = raw.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>() / aa.max(f64::MIN_POSITIVE);
            let offset = raw
                .iter()
                .zip(&a)
                .map(|(x, y)| cfg.offset_scale * (x - proj * y))
                .collect();
            TokenShape {
                duration,
                amplitude,
                frequency,
                offset,
            }
        })
        .collect();
    Structure { tokens, a, b }
}

/// Piecewise latent: every token segment is `amp·(c₁ sin ωτ + c₂ cos ωτ)`
/// with fresh Gaussian coefficients.
fn latent(shapes: &[&TokenShape], durations: &[usize], rng: &mut Rng) -> Vec<f64> {
    let mut z = Vec::new();
    for (s, &d) in shapes.iter().zip(durations) {
        let (c1, c2) = (rng.normal(), rng.normal());
        for tau in 0..d {
            let w = 2.0 * std::f64::consts::PI * s.frequency * (tau as f64 + 0.5) / d as f64;
            z.push(s.amplitude * (c1 * w.sin() + c2 * w.cos()));
        }
    }
    z
}

fn utterance(cfg: &ToyCorpusConfig, st: &Structure, rng: &mut Rng) -> Result<ToyUtterance> {
    let n = cfg.min_tokens + rng.below(cfg.max_tokens - cfg.min_tokens + 1);
    let tokens: Vec<u32> = (0..n).map(|_| rng.below(cfg.vocab_size) as u32).collect();
    let shapes: Vec<&TokenShape> = tokens.iter().map(|&t| &st.tokens[t as usize]).collect();
    let durations: Vec<usize> = shapes
        .iter()
        .map(|s| (s.duration as i64 + rng.below(3) as i64 - 1).max(1) as usize)
        .collect();
    let z = latent(&shapes, &durations, rng);
    let w = latent(&shapes, &durations, rng);
    let rho = cfg.cross_modal_rho;
    let rho_c = (1.0 - rho * rho).max(0.0).sqrt();
    let (da, dm) = (cfg.acoustic_dim, cfg.motion_dim);
    let t_len = z.len();
    let f32r = |v: f64| v as f32 as f64;
    let mut frames = Vec::with_capacity(t_len * (da + dm));
    let mut t = 0;
    for (s, &d) in shapes.iter().zip(&durations) {
        for _ in 0..d {
            for j in 0..da {
                frames.push(f32r(s.offset[j] + st.a[j] * z[t] + cfg.noise_std * rng.normal()));
            }
            let shared = rho * z[t] + rho_c * w[t];
            for j in 0..dm {
                frames.push(f32r(st.b[j] * shared + cfg.noise_std * rng.normal()));
            }
            t += 1;
        }
    }
    let frames = JointFrameSequence::new(Tensor::new(vec![t_len, da + dm], frames)?, da, dm, cfg.frame_rate)?;
    Ok(ToyUtterance {
        tokens,
        frames,
        latent: Tensor::vector(z.into_iter().map(f32r).collect()),
    })
}

/// Generates `cfg.n_utterances` utterances. Utterance `i` depends only on
/// `rng` and `i`.
pub fn generate_corpus(cfg: &ToyCorpusConfig, rng: &Rng) -> Result<Vec<ToyUtterance>> {
    cfg.validate()?;
    let st = structure(cfg, rng);
    let root = rng.named("utterances");
    (0..cfg.n_utterances)
        .into_par_iter()
        .map(|i| utterance(cfg, &st, &mut root.child(i as u64)))
        .collect()
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for &x in xs {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

/// Header dims and frame rate shared by every utterance in a file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusHeader {
    pub acoustic_dim: usize,
    pub motion_dim: usize,
    pub frame_rate: f64,
}

/// Writes the binary corpus format (little-endian): magic `MMTC`, version,
/// acoustic dim, motion dim, utterance count (u32 each), frame rate (f64);
/// then per utterance the token count, tokens, frame count, row-major `f32`
/// frames and the `f32` latent.
pub fn write_corpus(w: &mut impl Write, header: CorpusHeader, utts: &[ToyUtterance]) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(w, header.acoustic_dim)?;
    put_u32(w, header.motion_dim)?;
    put_u32(w, utts.len())?;
    w.write_all(&header.frame_rate.to_le_bytes())?;
    for (i, u) in utts.iter().enumerate() {
        if u.frames.acoustic_dim != header.acoustic_dim || u.frames.motion_dim != header.motion_dim {
            return Err(Error::Format(format!("utterance {i} does not match the header dims")));
        }
        if u.latent.numel() != u.frames.len() {
            return Err(Error::Format(format!("utterance {i} latent length differs from frame count")));
        }
        put_u32(w, u.tokens.len())?;
        for &t in &u.tokens {
            put_u32(w, t as usize)?;
        }
        put_u32(w, u.frames.len())?;
        put_f32s(w, u.frames.frames.data())?;
        put_f32s(w, u.latent.data())?;
    }
    Ok(())
}

/// Reads a corpus written by [`write_corpus`].
pub fn read_corpus(r: &mut impl Read) -> Result<(CorpusHeader, Vec<ToyUtterance>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad corpus magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported corpus version {version}")));
    }
    let da = get_u32(r)? as usize;
    let dm = get_u32(r)? as usize;
    let n = get_u32(r)? as usize;
    let mut fr = [0u8; 8];
    r.read_exact(&mut fr).map_err(truncated)?;
    let header = CorpusHeader {
        acoustic_dim: da,
        motion_dim: dm,
        frame_rate: f64::from_le_bytes(fr),
    };
    let mut utts = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let nt = get_u32(r)? as usize;
        let tokens = (0..nt).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let t_len = get_u32(r)? as usize;
        let frames = get_f32s(r, t_len * (da + dm))?;
        let latent = get_f32s(r, t_len)?;
        utts.push(ToyUtterance {
            tokens,
            frames: JointFrameSequence::new(Tensor::new(vec![t_len, da + dm], frames)?, da, dm, header.frame_rate)?,
            latent: Tensor::vector(latent),
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last utterance".into()));
    }
    Ok((header, utts))
}

pub fn save_corpus(path: &std::path::Path, header: CorpusHeader, utts: &[ToyUtterance]) -> Result<()> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, header, utts)?;
    crate::persist::write_atomic(path, &buf)
}

pub fn load_corpus(path: &std::path::Path) -> Result<(CorpusHeader, Vec<ToyUtterance>)> {
    let bytes = std::fs::read(path)?;
    read_corpus(&mut bytes.as_slice())
}
