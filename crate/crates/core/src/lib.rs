//! Scenario-based stochastic MPC with probabilistic control-barrier-function
//! constraints, used as the function approximator of Q-learning.
//!
//! The unit-horizon controller carries a learnable convex piecewise-quadratic
//! terminal cost and learnable linear class-K coefficients. Its optimal
//! value, action value and their parameter gradients come from a dense
//! interior-point solver that returns exact multipliers.

pub mod approximators;
pub mod env;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod learning;
pub mod rng;
pub mod safety;
pub mod scmpc;
pub mod solver;

pub use approximators::{PsdNet, PwqNet};
pub use env::{stage_cost, step, Action, DisturbanceModel, EpisodeConfig, EpisodeLog, LtiSystem, StageCostConfig, State};
pub use error::{Error, Result};
pub use geometry::{BoundarySampler, InvariantSet, Polytope};
pub use harness::{ExperimentConfig, Manifest, Mode, OracleGrid};
pub use learning::{Checkpoint, TrainConfig, Transition};
pub use safety::{BarrierSet, ClassKParams, RiskBudget};
pub use scmpc::{BaselineConfig, PolicyOutput, Scmpc, ScmpcConfig, ThetaParams};
pub use solver::{ConvexProgram, SolveOptions, SolveResult};
