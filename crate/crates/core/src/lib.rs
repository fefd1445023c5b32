//! Core primitives for evaluating clinical chain-of-thought output.
//!
//! Everything in this crate is pure computation over owned data: the
//! triple-list grammar, chain segmentation and level classification, the
//! judge rubric and score aggregation, answer matching, organ-scoped
//! knowledge-graph retrieval, segmentation label remapping and ROI
//! extraction, the interleaved image-reasoning round protocol, and the
//! seeded patient split. IO, HTTP, and orchestration live in the
//! companion `medcot-cli` crate.
//!
//! The crate is `no_std` + `alloc` so the same logic can run inside
//! embedded inference harnesses as well as on the command line.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod accuracy;
pub mod chain;
pub mod iir;
pub mod kg;
pub mod labels;
pub mod rubric;
pub mod split;
pub mod triples;

pub use chain::{ChainLevel, CoTRecord, Organ, ReasoningChain, TaskKind, Triplet};
pub use rubric::{DimScore, Weights};
