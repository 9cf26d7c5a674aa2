//! Numerical laboratory for passive-scalar mixing and enhanced dissipation
//! by two-dimensional Hamiltonian flows.

pub mod actionangle;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fft;
pub mod field;
pub mod io;
pub mod lagrangian;
pub mod oracle;
pub mod ode;
pub mod period;
pub mod quad;
pub mod runner;
pub mod spectral;

pub use error::{MixlabError, Result};
pub use field::{HamiltonianField, LevelAnnulus};
