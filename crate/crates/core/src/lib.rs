//! Collision avoidance for double-integrator agents with control barrier
//! function quadratic programs.
//!
//! - [`qp`]: dense strictly convex QP solver with a least-infeasible fallback.
//! - [`model`]: agent dynamics, pairwise and arena barrier constraints, LQR baseline.
//! - [`policies`]: Centralized, DF, DR, CCS and PCCA controllers.
//! - [`sim`]: closed-loop trials and their metrics.
//! - [`montecarlo`]: scenario sampling, batches and the radius-margin rerun.
//! - [`intersection1d`]: the two-agent intersection model, its equilibria and sweeps.

pub mod intersection1d;
pub mod model;
pub mod montecarlo;
pub mod policies;
pub mod qp;
pub mod sim;

pub use model::{AgentState, BarrierParams, LqrGain, Vec2};
pub use policies::{LoopBreaker, PolicySpec};
