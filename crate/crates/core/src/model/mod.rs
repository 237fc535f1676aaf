//! Target language model, feature-level draft model, grouped LM-head
//! router, key/value caches, parameter accounting and weight files.

mod block;
mod cache;
mod config;
mod draft;
pub mod io;
mod params;
mod router;
mod target;

use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{AttnMask, Tensor, TensorError};

pub use block::BlockWeights;
pub use cache::{KvCache, KvRows};
pub use config::{ModelConfig, RouterActivation};
pub use draft::{DraftForward, DraftModel};
pub use params::{count_params, CountParams, LlamaShape, ParamReport};
pub use router::{group_logits, grouped_head_prob, top_groups, GroupedDist, RouterHead};
pub use target::{ForwardOutput, TargetModel};

#[cfg(test)]
pub(crate) use block::BlockVars;
pub(crate) use draft::DraftVars;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token id {token} is outside the vocabulary of {vocab}")]
    Vocabulary { token: usize, vocab: usize },
    #[error("position {position} exceeds max_seq_len {max}")]
    SequenceTooLong { position: usize, max: usize },
    #[error("cache state error: {0}")]
    State(String),
    #[error("weight file format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Attention pattern of the new rows in a forward call.
#[derive(Clone, Debug, PartialEq)]
pub enum Visibility {
    /// Every past row plus new rows up to and including itself.
    Causal,
    /// Row-major `[new x (past + new)]` flags.
    Explicit(Vec<bool>),
}

impl Visibility {
    pub(crate) fn to_mask(&self, past: usize, new: usize) -> Result<AttnMask> {
        match self {
            Visibility::Causal => Ok(AttnMask::Causal { offset: past }),
            Visibility::Explicit(allowed) => {
                if allowed.len() != new * (past + new) {
                    return Err(ModelError::State(format!(
                        "visibility has {} flags for {new} rows over {} keys",
                        allowed.len(),
                        past + new
                    )));
                }
                Ok(AttnMask::Explicit {
                    keys: past + new,
                    allowed: Arc::new(allowed.clone()),
                })
            }
        }
    }

    /// Each new row sees all past rows, itself, and the new rows listed as
    /// its ancestors (`parents[i] < i`, `None` for a top-level row).
    pub fn tree(past: usize, parents: &[Option<usize>]) -> Self {
        let n = parents.len();
        let keys = past + n;
        let mut allowed = vec![false; n * keys];
        for i in 0..n {
            let row = &mut allowed[i * keys..(i + 1) * keys];
            row[..past].iter_mut().for_each(|a| *a = true);
            let mut cur = Some(i);
            while let Some(c) = cur {
                row[past + c] = true;
                cur = parents[c];
            }
        }
        Visibility::Explicit(allowed)
    }
}

pub(crate) fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&token) => Err(ModelError::Vocabulary { token, vocab }),
        None => Ok(()),
    }
}

/// Models exposing their weights by stable names.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// SHA-256 over names, shapes and raw bits of every named tensor.
    fn checksum(&self) -> String {
        checksum_tensors(self.named_params().into_iter())
    }
}

pub fn checksum_tensors<'a>(tensors: impl Iterator<Item = (String, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
