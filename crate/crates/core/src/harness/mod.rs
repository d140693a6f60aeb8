//! Synthetic corpus, configuration, checkpoints and the end-to-end pipeline.

pub mod config;
pub mod checkpoint;
pub mod corpus;
pub mod log;
pub mod pipeline;
