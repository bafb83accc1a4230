//! Discrete-time lab for zero-sum mean-field Dynkin games.
//!
//! The solvers work on a [`lattice::NoiseLattice`]: either an exact
//! non-recombining tree of Brownian and Poisson increments or a seeded
//! Monte Carlo path ensemble with regression-based conditional expectations.

// `!(x > 0.0)` style guards reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chaos;
pub mod coefficients;
pub mod drbsde;
pub mod error;
pub mod estimates;
pub mod game;
pub mod joint;
pub mod lattice;
pub mod meanfield;
pub mod measure;
pub mod particles;
pub mod scenarios;

pub use error::{Error, Result};
