//! Joint acoustic and motion sequence synthesis.
//!
//! One conditional vector-field network generates concatenated
//! `[acoustic ‖ motion]` frames from token input. It can be trained with
//! optimal-transport conditional flow matching or with a score-matching
//! baseline, and sampled with a fixed-step Euler ODE solver.

pub mod align;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;
pub mod persist;
pub mod sampler;
pub mod sequence;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Regime};
pub use sequence::JointFrameSequence;
pub use tensor::{Rng, Tape, Tensor, Var};
