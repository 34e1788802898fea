//! Galerkin pseudospectral laboratory for the stochastically forced 2D
//! Navier–Stokes system in vorticity form on the torus.

pub mod dynamics;
pub mod error;
pub mod field;
pub mod forcing;
pub mod lattice;
pub mod par;
pub mod rng;
pub mod snapshot;
pub mod spectral;
pub mod stats;
pub mod variational;
pub mod observable;
pub mod control;
pub mod fk;
pub mod steering;
pub mod config;
pub mod checks;
pub mod report;
pub mod experiments;

pub use dynamics::{Model, NoisePath, TrajectoryRecord};
pub use error::{Error, Result};
pub use field::{TangentField, VelocityField, VorticityField};
pub use forcing::{build_injection, check_condition_h, ForcingSet, NoiseInjection};
pub use lattice::{Lattice, Mode};
pub use spectral::Spectral;
