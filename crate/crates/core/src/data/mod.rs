//! Synthetic multimodal corpus and evaluation metrics.

mod bench;
mod corpus;
mod marginal;
mod metrics;

pub use bench::{benchmark_rtf, RtfRow};
pub use corpus::{
    generate_corpus, load_corpus, read_corpus, save_corpus, write_corpus, CorpusHeader, ToyCorpusConfig, ToyUtterance,
};
pub(crate) use corpus::{get_f32s, get_u32, truncated};
pub use marginal::{marginal_baseline_train, marginal_configs, split_dataset, MarginalBaseline};
pub use metrics::{cross_modal_dependence, energy_distance, energy_distance_raw, ENERGY_MAX_FRAMES};
