//! Drafting and lossless verification.
//!
//! A cycle drafts a chain or a tree of candidate tokens, evaluates every
//! candidate with one target forward pass under a tree attention mask, keeps
//! the longest accepted root path and appends one token sampled from the
//! target. Greedy decoding reproduces vanilla greedy output exactly; sampled
//! decoding reproduces the target's sampling law.

mod config;
mod dist;
mod drafter;
mod generate;
mod sampler;
mod tree;
mod verify;
#[cfg(test)]
mod tests;

use thiserror::Error;

use crate::model::ModelError;

pub use config::{DraftMode, EngineConfig};
pub use dist::{routed_logits, scores_to_dist, temperature_probs, DraftDist, HeadMode};
pub use drafter::{AdversarialDrafter, DraftScores, Drafter, EagleDrafter, MirrorDrafter, RoundInput};
pub use generate::{generate, vanilla_generate, write_trace, CycleRecord, Generation, Session, TraceLine};
pub use sampler::{enumerate_law, ChaChaSampler, Sampler};
pub use tree::{draft_chain, draft_tree, DraftNode, DraftSettings, DraftTree};
pub use verify::{verify_greedy, verify_sampling, Verdict};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("cache divergence: {0}")]
    CacheDivergence(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;
