//! Command-line companion to `medcot-core`: judge-backed scoring flows,
//! the CoT data engine, volume file formats, and report aggregation.

pub mod cli;
pub mod config;
pub mod engine;
pub mod jsonl;
pub mod judge;
pub mod volume_io;

pub use cli::run_main;
