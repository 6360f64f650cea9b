//! Multi-UAV RSMA network simulator and max-min rate optimizer.
//!
//! The library places UAV base stations in an obstacle-filled area and
//! jointly optimizes their positions, rate-splitting power allocation and
//! user association to maximize the minimum ground-user rate. Obstacles are
//! vertical building prisms; line-of-sight is decided with per-user blocking
//! planes built from building silhouettes. The optimizer alternates a
//! trust-region position subproblem and a convex power/association
//! subproblem, with an integrality penalty driving the relaxed association
//! back to binary values.
//!
//! Module map:
//! - [`geometry`]: blocking planes, LoS queries, ray-cast oracle.
//! - [`channel`]: LoS/NLoS path-loss model.
//! - [`rsma`]: common/private SINRs, achievable rates, NOMA baseline.
//! - [`surrogate`]: expansion points and concave surrogate models.
//! - [`backend`]: deterministic barrier interior-point solver.
//! - [`solver`]: the alternating optimization loop.
//! - [`scenario`]: scenario schema, generation, initialization.
//! - [`harness`]: experiment runner, baselines, CSV/JSON outputs.

pub mod backend;
pub mod channel;
pub mod geometry;
pub mod harness;
pub mod rsma;
pub mod scenario;
pub mod solver;
pub mod surrogate;

pub use geometry::Point3;
