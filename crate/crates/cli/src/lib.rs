//! Support code for the `wfc` binary: run manifests, exit codes and the
//! train/evaluate cell shared by `sweep-beta` and the experiment tests.

pub mod error;
pub mod experiment;
pub mod manifest;

pub use error::CliError;
pub use experiment::{evaluate, median, run_cell, CellOutcome, CellSplit};
pub use manifest::{sha256_file, RunManifest};
