//! Target pretraining, EAGLE-style and multi-step draft training with
//! cross-step representation alignment, and two-stage router training.

mod batch;
mod config;
mod corpus;
mod draft_train;
mod losses;
mod optim;
mod pretrain;
mod rollout;
mod router_train;

use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::TensorError;

pub use batch::TrainBatch;
pub use config::{DraftMethod, RouterTrainConfig, TargetTrainConfig, TrainConfig};
pub use corpus::{Corpus, MarkovSource};
pub use draft_train::{draft_loss, draft_train_step, train_draft, LossBreakdown, LossRow};
pub use losses::{csra_loss, csra_loss_tape, csra_loss_values, info_nce, router_loss, router_loss_tape, router_target};
pub use optim::AdamW;
pub use pretrain::{heldout_cross_entropy, pretrain_target};
pub use rollout::{multi_step_rollout, StepFeatures};
pub use router_train::{
    build_router_dataset, router_accuracy, train_router, train_router_on, RouterDataset,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("non-finite loss at step {step}: {dump}")]
    NonFinite { step: usize, dump: String },
    #[error("frozen weights changed during training: {0}")]
    FreezeViolated(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;
