//! Ensemble simulation of parameterized incompressible Navier-Stokes flows.
//!
//! All members of an ensemble advance with a second-order BDF scheme whose
//! implicit part uses the ensemble-mean viscosity and the ensemble-mean
//! convecting velocity, so every member shares one coefficient matrix per
//! time step. Member-specific viscosity deviations and velocity fluctuations
//! are treated explicitly on the right-hand side.

pub mod assembly;
pub mod cli;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod fe;
pub mod mesh;
mod par;
pub mod scenarios;
pub mod solve;

pub use error::{Error, Result};
