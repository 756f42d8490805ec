//! Command implementations behind the `mfdiff` binary.
//!
//! Every command takes a [`RunConfig`] and writes its artefacts under
//! `out_dir`: `data/` for datasets and the manifest, `model/` for the
//! checkpoint and training logs, `plan/` for executed episodes and `eval/` for
//! metrics.

pub mod collect;
pub mod config;
pub mod eval;
pub mod plan;
pub mod plot;
pub mod train;
pub mod verify;

pub use config::RunConfig;
