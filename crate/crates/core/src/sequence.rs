use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default frame rate of the feature streams (22.05 kHz audio, hop 256).
pub const DEFAULT_FRAME_RATE: f64 = 22050.0 / 256.0;

/// Time-major `T×(acoustic_dim + motion_dim)` frames `[a ‖ m]` with a
/// validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct JointFrameSequence {
    pub frames: Tensor,
    pub acoustic_dim: usize,
    pub motion_dim: usize,
    pub mask: Vec<bool>,
    pub frame_rate: f64,
}

impl JointFrameSequence {
    pub fn new(frames: Tensor, acoustic_dim: usize, motion_dim: usize, frame_rate: f64) -> Result<Self> {
        let mask = vec![true; frames.rows()];
        Self::with_mask(frames, acoustic_dim, motion_dim, mask, frame_rate)
    }

    pub fn with_mask(
        frames: Tensor,
        acoustic_dim: usize,
        motion_dim: usize,
        mask: Vec<bool>,
        frame_rate: f64,
    ) -> Result<Self> {
        if frames.rank() != 2 || frames.cols() != acoustic_dim + motion_dim {
            return Err(Error::shape(
                "joint frames",
                frames.shape(),
                &[acoustic_dim, motion_dim],
            ));
        }
        if mask.len() != frames.rows() {
            return Err(Error::shape("joint frames mask", frames.shape(), &[mask.len()]));
        }
        Ok(Self {
            frames,
            acoustic_dim,
            motion_dim,
            mask,
            frame_rate,
        })
    }

    /// Joins acoustic `T×Da` and motion `T×Dm` blocks.
    pub fn from_modalities(acoustic: &Tensor, motion: &Tensor, frame_rate: f64) -> Result<Self> {
        let frames = Tensor::concat_cols(&[acoustic, motion])?;
        Self::new(frames, acoustic.cols(), motion.cols(), frame_rate)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joint_dim(&self) -> usize {
        self.acoustic_dim + self.motion_dim
    }

    pub fn valid_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Duration in seconds of the valid frames.
    pub fn seconds(&self) -> f64 {
        self.valid_frames() as f64 / self.frame_rate
    }

    pub fn acoustic(&self) -> Tensor {
        self.frames.slice_cols(0, self.acoustic_dim)
    }

    pub fn motion(&self) -> Tensor {
        self.frames.slice_cols(self.acoustic_dim, self.joint_dim())
    }
}

/// Splits into the acoustic (first `acoustic_dim` channels) and motion blocks.
pub fn split_modalities(seq: &JointFrameSequence) -> Result<(Tensor, Tensor)> {
    if seq.frames.cols() != seq.joint_dim() {
        return Err(Error::shape(
            "split_modalities",
            seq.frames.shape(),
            &[seq.acoustic_dim, seq.motion_dim],
        ));
    }
    Ok((seq.acoustic(), seq.motion()))
}
