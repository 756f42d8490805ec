//! Mean-field trajectory diffusion planning for many-agent offline RL.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: VP noise schedule, coarse-to-fine subdivision schedule and
//!   score-network work accounting.
//! - [`env`]: the mean-field MDP contract with the Ising stage game and the
//!   sequential Gaussian Squeeze.
//! - [`offline`]: mean-field Q-learning behaviour policy, dataset splits and
//!   the `MFDD` dataset file format.
//! - [`model`]: a small reverse-mode autodiff tape, the mean-field score
//!   network `A + B[nu]`, the value estimator and the `MFCK` checkpoint format.
//! - [`train`]: value-weighted mean-field score matching over subdivision
//!   levels.
//! - [`plan`]: reverse-SDE sampling with inpainting, value guidance and agent
//!   branching; receding-horizon execution.
//! - [`eval`]: returns, exploitability, optimal-transport distances,
//!   propagation-of-chaos curves, Lipschitz probes and horizon fits.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod offline;
pub mod plan;
pub mod rng;
pub mod schedule;
pub mod stats;
pub mod train;

pub use env::{ActionKind, EnvKind, EnvSpec, JointAction, MeanFieldState};
pub use error::{Error, Result};
pub use env::TrajectoryLayout;
pub use model::{ModelBundle, ParamVector, ScoreModel, ValueModel};
pub use offline::OfflineDataset;
pub use schedule::{DiffusionSchedule, SubdivisionSchedule};
