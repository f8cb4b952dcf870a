//! Backstepping boundary control for a continuum ensemble of transport
//! equations coupled to a single counter-convecting equation.
//!
//! The pipeline samples a [`model::PlantModel`] on a [`grid::GridSpec`],
//! solves the kernel equations by successive approximation along
//! characteristics ([`kernelsolve`]), builds the Volterra data of the target
//! system ([`volterra`]) and simulates the plant or the target system
//! ([`simulator`]). The [`cli`] module wires these into a command line tool.

pub mod characteristics;
pub mod cli;
pub mod error;
pub mod grid;
pub mod kernelsolve;
pub mod model;
pub mod simulator;
pub mod volterra;

pub use error::{Error, Result};
