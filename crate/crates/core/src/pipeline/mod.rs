// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative sweeps over models, checkpoints and analyses.
//!
//! A run is a grid of cells keyed by (model, step, analysis). Each cell
//! writes one JSON file under `cells/` and a manifest entry with input and
//! output digests; a re-run reuses any cell whose digests still match.
//! Tables are rebuilt from cell files in a fixed order.

pub mod cells;
pub mod config;
pub mod float;
pub mod manifest;
pub mod run;
pub mod sweep;
pub mod tables;

pub use config::{Analysis, ModelSpec, RunConfig};
pub use manifest::{CellRecord, CellStatus, RunManifest};
pub use run::{parse_only, run, RunOptions, RunSummary};
