//! Numerical laboratory for the compressible two-fluid Navier-Stokes system with an
//! algebraic pressure closure, written in Lagrangian coordinates.

pub mod closure;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod lagrangian;
pub mod linear_core;
pub mod mms;
pub mod picard;
pub mod solvers;
pub mod spectra;

pub use error::{ClosureError, Error, Result};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
