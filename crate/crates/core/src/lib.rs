//! Decentralized control-barrier-function safety filters for planar
//! double-integrator robots, the analysis of their deadlock states, and a
//! supervisor that drives deadlocked groups to their goals.
//!
//! The crate is organized bottom-up:
//!
//! * [`model`] and [`vec2`]: robot state, gains, the PD goal controller.
//! * [`cbf`]: the pairwise safety index and its linear constraint rows.
//! * [`qp`]: an exact active-set solver for the per-robot two-variable QP.
//! * [`deadlock`]: deadlock detection and the analytical deadlock families.
//! * [`graphenum`]: counting and embedding of admissible deadlock graphs.
//! * [`resolution`]: the three-phase supervisor.
//! * [`sim`]: scenarios, integration, logging and the post-hoc audit.

pub mod cbf;
pub mod deadlock;
pub mod error;
pub mod graphenum;
pub mod model;
pub mod qp;
pub mod resolution;
pub mod sim;
pub mod vec2;

pub use cbf::{assemble_qp, constraint_bound, safety_index, ConstraintRow, PairGeometry, RowKind};
pub use deadlock::{DeadlockReport, DeadlockThresholds, ThreeRobotCategory};
pub use error::{Error, Result};
pub use model::{pd_control, GoalSpec, Params, RobotState, WorldState};
pub use qp::{solve_qp, QpProblem, QpSolution, QpStatus};
pub use vec2::Vec2;
