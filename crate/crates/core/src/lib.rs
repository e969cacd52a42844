//! Reconstruction of traffic densities on road networks with a Gaussian
//! Markov random field prior.
//!
//! The pipeline: build a [`RoadGraph`], learn a [`Model`] from complete
//! historical snapshots ([`learn::fit`]), then fill in the unobserved roads
//! of a [`PartialSnapshot`] ([`reconstruct::reconstruct_snapshot`]).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod colors;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gmrf;
pub mod graph;
pub mod io;
pub mod learn;
pub mod reconstruct;
pub mod seeds;
pub mod sparse;

pub use colors::ColorBinning;
pub use error::{Error, Result};
pub use eval::{loocv, mae, EvalPlan, EvalReport};
pub use gmrf::{assemble_posterior, Model, PartialSnapshot, PosteriorProblem, Snapshot};
pub use graph::{precision_pattern, subgraph_pattern, PrecisionPattern, RoadGraph, RoadId};
pub use learn::{fit, LearnConfig, SufficientStats, TrainingReport};
pub use reconstruct::{
    direct_solve, mean_field_solve, reconstruct_snapshot, ReconstructionResult, Scheme,
    SolverConfig,
};
