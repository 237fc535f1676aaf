//! Run configuration, artifact layout and the pipeline commands behind the
//! command-line tool.
//!
//! Every command reads one [`RunConfig`], loads its prerequisites from the
//! weights directory and writes its artifacts next to them. Failures map to
//! a small set of process exit codes through [`CliError::exit_code`].

mod commands;
mod config;

use std::path::PathBuf;

use thiserror::Error;

use crate::analytics::AnalyticsError;
use crate::engine::EngineError;
use crate::model::ModelError;
use crate::train::TrainError;

pub use commands::{
    bench_stem, cmd_bench, cmd_diag_infonce, cmd_generate, cmd_train_draft, cmd_train_router, cmd_train_target, decode_text,
    encode_text, BenchReport, GenerateReport, TrainReport,
};
pub use config::{BenchConfig, DiagConfig, MarkovConfig, Overrides, PathsConfig, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing {path}: run `{stage}` first")]
    Dependency { stage: &'static str, path: PathBuf },
    #[error("data or format error: {0}")]
    Data(String),
    #[error("numeric or contract violation: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Data(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::Config(_) => CliError::Config(msg),
            ModelError::Vocabulary { .. }
            | ModelError::SequenceTooLong { .. }
            | ModelError::Format(_)
            | ModelError::Io(_) => CliError::Data(msg),
            ModelError::State(_) | ModelError::Tensor(_) => CliError::Numeric(msg),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        match e {
            TrainError::Config(_) => CliError::Config(msg),
            TrainError::Data(_) => CliError::Data(msg),
            TrainError::Model(m) => m.into(),
            TrainError::Distribution(_)
            | TrainError::NonFinite { .. }
            | TrainError::FreezeViolated(_)
            | TrainError::Tensor(_) => CliError::Numeric(msg),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        let msg = e.to_string();
        match e {
            EngineError::Config(_) => CliError::Config(msg),
            EngineError::Contract(_) | EngineError::CacheDivergence(_) => CliError::Numeric(msg),
            EngineError::Model(m) => m.into(),
            EngineError::Io(_) => CliError::Data(msg),
        }
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        match e {
            AnalyticsError::Parameter(m) => CliError::Config(m),
            AnalyticsError::Engine(e) => e.into(),
            AnalyticsError::Train(e) => e.into(),
            AnalyticsError::Io(e) => e.into(),
        }
    }
}
