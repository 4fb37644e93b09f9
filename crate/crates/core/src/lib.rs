//! Piecewise deterministic processes whose state is a point measure, with
//! value iteration for stopping before the n-th jump.
//!
//! * [`point_measure`]: finite point measures, hybrid states and distances.
//! * [`pdmp`]: model contract and exact simulation of the embedded chain.
//! * [`solver`]: dynamic-programming operators, value iteration and
//!   ε-optimal stopping policies.
//! * [`cell`]: growth-division cell models and closed-form comparison values.

// `!(x > 0.0)` guards reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cell;
pub mod pdmp;
pub mod point_measure;
pub mod quadrature;
pub mod rng;
pub mod solver;
pub mod synthetic;

pub use pdmp::{PdmpError, PdmpModel, StopRule, Trajectory};
pub use point_measure::{HybridState, Mode, PointMeasure};
pub use rng::RngStream;
pub use solver::{SolverConfig, SolverError};
