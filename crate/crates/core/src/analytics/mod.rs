//! Acceptance metrics, analytic speedup models and the cross-step feature
//! diagnostic.

mod diag;
mod metrics;
mod speedup;

use thiserror::Error;

pub use diag::{cross_step_infonce, step_pair_infonce, InfoNceMatrix};
pub use metrics::{acceptance_length, acceptance_rates, activated_fraction, measured_speedup, Metrics};
pub use speedup::{latency_ratio_estimate, speedup_from_latency, speedup_from_params, LatencyModel};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalyticsError>;
