//! Harmonic maps from a box Ω ⊂ R^p into the quadratic Wasserstein space
//! over a box D ⊂ R^q: a dynamic (Benamou-Brenier) solver, the exact
//! quantile and Bures-Wasserstein reductions, approximate energies, dual
//! certificates and maximum-principle checks.

pub mod analysis;
pub mod bbsolver;
pub mod bures;
pub mod cli;
pub mod energy;
pub mod error;
pub mod grid;
pub mod measures;
pub mod network_simplex;
pub mod quantile_solver;

pub use error::{Error, Result};
