//! Configuration, checkpoints, evaluation and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;

pub use checkpoint::CheckpointContainer;
pub use config::{EvalConfig, RunConfig};

/// Seed of one pipeline stage under run seed `seed`.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let rng = crate::ndmath::Rng::named(seed, stage);
    rng.seed() ^ rng.stream_id()
}
