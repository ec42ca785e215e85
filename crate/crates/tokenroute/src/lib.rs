//! Instruction-conditioned token sparsification for action-chunk policies.
//!
//! The library implements a three-stage pipeline: FiLM-gated aggregation of
//! two visual encoder branches into a small set of summary tokens, scheduled
//! per-layer pruning of those tokens inside the language-model stack, and a
//! hybrid-masked attention layout that decodes a whole action chunk in one
//! forward pass. An analytic FLOPs ledger mirrors the executed matmuls
//! exactly, and a deterministic gridworld manipulation task exercises the
//! whole thing end to end. See the `book/` guide for the concepts.

pub mod cli;
pub mod config;
pub mod decoder;
pub mod flops;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod sparsity;
pub mod task;
pub mod vision;

pub use error::{Error, Result};
