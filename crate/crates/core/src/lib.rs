//! Sketched natural-gradient solvers and regularized Kaczmarz methods for
//! linear least squares and linear least quadratics, together with the exact
//! and Monte Carlo spectral quantities that govern their rates.

pub mod error;
pub mod experiments;
pub mod kernels;
pub mod linalg;
pub mod problems;
pub mod rng;
pub mod solvers;
pub mod spectral;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use linalg::{Matrix, Vector};
