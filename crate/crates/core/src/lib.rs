//! Regression-based solvers for backward stochastic differential equations
//! and their reflected variants, with first-order model-risk sensitivities
//! for drift deviations measured in L-infinity or L2 balls.
//!
//! The crate is organized bottom-up:
//!
//! - [`paths`]: seeded Brownian ensembles and measure-change weights,
//! - [`generators`]: drivers, Hamiltonians, and robustified drivers,
//! - [`basis`]: least-squares regression for conditional expectations,
//! - [`bsde`] / [`rbsde`]: the backward solvers,
//! - [`sensitivity`]: closed-form sensitivities and their oracles,
//! - [`dualtools`]: deterministic duality utilities,
//! - [`scenarios`]: end-to-end benchmark configurations,
//! - [`config`]: the experiment configuration consumed by the CLI.

pub mod basis;
pub mod bsde;
pub mod config;
pub mod dualtools;
pub mod error;
pub mod generators;
pub mod paths;
pub mod rbsde;
pub mod scenarios;
pub mod sensitivity;

pub use error::{Error, Result};
