//! Solver for mean-field forward-backward SDEs whose backward driver is the
//! pointwise maximum of a strongly concave objective over a law-dependent,
//! non-convex union of intervals.
//!
//! The pipeline is:
//!
//! - [`uncertainty`] and [`measures`]: interval-union ambiguity sets and
//!   empirical laws of the value process;
//! - [`optimizer`]: the pointwise maximizer `a*(p)` and the optimized driver `G`;
//! - [`sde`] and [`bsde`]: forward Euler–Maruyama particles and the backward
//!   least-squares Monte Carlo sweep (plus an RK4 solver for the noiseless case);
//! - [`coupling`]: the Picard fixed-point engine with weighted-norm diagnostics;
//! - [`properties`], [`scenarios`], [`pde`]: valuation-operator checks, turnkey
//!   reproductions and a finite-difference cross-check.

pub mod bsde;
pub mod cli;
pub mod coupling;
pub mod error;
pub mod measures;
pub mod optimizer;
pub mod pde;
pub mod properties;
pub mod scenarios;
pub mod sde;
pub mod uncertainty;

pub use error::{Error, Result};
