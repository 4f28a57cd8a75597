//! Score-based idempotent generative networks.
//!
//! A generator `f` is trained to be the identity on data, idempotent, and
//! consistent along probability-flow ODE trajectories of a teacher score, so
//! that one application maps noise to samples.
//!
//! Modules, bottom up: [`diffcore`] (tensors, reverse-mode tape, MLP, Adam),
//! [`schedule`], [`score`], [`pfode`], [`losses`], [`trainer`], [`sampler`],
//! [`eval`] and [`data`].

pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod losses;
pub mod pfode;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod trainer;

pub use data::{Dataset, DatasetKind, DatasetSpec};
pub use diffcore::{Activation, Graph, MlpNet, Tensor, Var};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use losses::{Distance, LossReport, LossWeights};
pub use pfode::Solver;
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use score::{GaussianMixture, ScoreSource};
pub use trainer::{Checkpoint, PairStore, RunConfig};
