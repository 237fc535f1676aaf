//! Desk-scale speculative decoding: a small autodiff substrate, a target
//! language model with a feature-level draft model and grouped LM-head
//! router, their training procedures, a lossless drafting/verification
//! engine, and the analytic speedup models used to interpret results.

pub mod tensor;
pub mod model;
pub mod train;
pub mod engine;
pub mod analytics;
pub mod cli_io;
