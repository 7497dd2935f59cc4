//! Forward–backward stochastic neural network solvers for incompressible
//! Navier–Stokes, a diagonalized Cahn–Hilliard system and the coupled
//! Cahn–Hilliard–Navier–Stokes system.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod fnn;
pub mod metrics;
pub mod problems;
pub mod sde;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
