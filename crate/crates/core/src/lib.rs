//! Reachability-based safety verification of perception-driven closed-loop
//! systems under bounded perceptual error.
//!
//! The pipeline: describe a [`models::ClosedLoopModel`], pick a
//! [`hamiltonian::HamiltonianSpec`] (exact where the controller allows it,
//! otherwise a lower bound from a [`bounds::ControlBoundsField`]), solve the
//! HJI variational inequality with [`solver::solve`], then query the
//! [`solver::ValueField`] through [`analysis`] and [`rollout`].

pub mod analysis;
pub mod bounds;
pub mod error;
pub mod grid;
pub mod hamiltonian;
pub mod io;
pub mod models;
pub mod presets;
pub mod rollout;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{Grid, ScalarField};
pub use models::{ClosedLoopModel, Controller, Dynamics, ErrorBound};
pub use solver::{solve, FailureSpec, SolveConfig, ValueField};
