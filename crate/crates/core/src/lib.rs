// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-head probing for lexical disambiguation across training
//! checkpoints of GPT-NeoX-style language models.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`engine`] loads checkpoints and runs an instrumented forward pass.
//! - [`stimuli`] reads relatedness-judgment stimuli and aligns target and
//!   cue words to token spans.
//! - [`probes`] turns traces into layer R², per-head cue attention, 1-back
//!   tests, trajectory regressions and the composite index.
//! - [`ablation`] edits query/key weights and measures the change in R².
//! - [`stats`] holds the regression and testing kernels.
//! - [`hub`] fetches and caches checkpoints over HTTP.
//! - [`pipeline`] and [`report`] run declarative sweeps and draw figures.

pub mod ablation;
pub mod demo;
pub mod engine;
pub mod error;
pub mod hub;
pub mod oracle;
pub mod parallel;
pub mod pipeline;
pub mod probes;
pub mod report;
pub mod stats;
pub mod stimuli;

pub use error::{ProbeError, Result};
