//! Persistence, data, configuration, evaluation and benchmarking around the models.

pub mod archive;
pub mod oracle;
pub mod pipeline;
pub mod corpus;
pub mod eval;
pub mod config;
