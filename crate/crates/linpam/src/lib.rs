//! Ensemble filtering with strong preservation of linear invariants.
//!
//! The crate provides two analysis families — a stochastic ensemble Kalman
//! filter and a nonlinear stochastic map filter built on monotone triangular
//! transport maps — together with constrained variants that keep linear
//! invariants of the state (mass, embedded conserved quantities) exact for
//! every ensemble member. A twin-experiment harness with three benchmark
//! models and a `linpam` command line front end sit on top.

pub mod enkf;
pub mod error;
pub mod fft;
pub mod harness;
pub mod invariant_subspace;
pub mod models;
pub mod sampling;
pub mod smf;
pub mod transport;

pub use error::{Error, Result};
