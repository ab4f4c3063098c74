//! 2D variable-density incompressible Navier-Stokes on a MAC grid, with the
//! Lagrangian machinery (flow maps, cofactors, divergence right-inverse,
//! negative Sobolev norms) needed to measure stability of density-patch
//! initial data with vacuum, plus a scenario harness that verifies the
//! exponential-decay and stability scaling laws on desk-scale runs.

// pub mod config;
pub mod field_io;
pub mod grid;
pub mod lagrangian;
pub mod linalg;
pub mod metrics;
// pub mod scenario;
pub mod solver;
pub mod timeseries;
pub mod transport;
// pub mod bogovskii;

pub use grid::{Grid, ScalarField, VectorField};
