//! Polymer-expansion renormalization group for the two-dimensional sine-Gordon model.
//!
//! The crate is organised by role:
//!
//! * [`lattice`]: torus block geometry, polymers, enumeration and the large-set regulator.
//! * [`covariance`]: slice, full and continuum covariances with derived scalars.
//! * [`fields`]: discretized fields, derivatives, norms, regulators and Gaussian machinery.
//! * [`activities`]: polymer activities, the polymer exponential, charge sectors and norms.
//! * [`interpolation`]: forests, the interpolation formula and tree counting.
//! * [`rgmap`]: fluctuation, extraction and scaling maps and the composed step.
//! * [`flow`]: IR and UV flow drivers and the partition-function oracle.
//! * [`checks`]: named residual checks behind the identity and acceptance suites.

pub mod error;
pub mod fields;
pub mod interpolation;
pub mod lattice;
pub mod activities;
pub mod covariance;
pub mod numerics;
pub mod rgmap;
pub mod flow;
pub mod checks;

pub use error::{Error, Result};
