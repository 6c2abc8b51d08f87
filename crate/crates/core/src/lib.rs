//! Decoupled data-based control.
//!
//! The pipeline has three decoupled stages run against a black-box
//! simulator:
//!
//! 1. [`openloop`]: finite-difference gradient descent for a nominal
//!    control sequence.
//! 2. [`sysid`]: time-varying eigensystem realization of the perturbation
//!    dynamics around that nominal, from random input rollouts.
//! 3. [`feedback`]: time-varying LQR and Kalman gains on the identified
//!    reduced-order model.
//!
//! [`evaluation`] runs the resulting policy in closed loop under process
//! noise and aggregates Monte Carlo statistics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod feedback;
pub mod numerics;
pub mod openloop;
pub mod sysid;

pub use error::{Error, Result};
pub use numerics::{Matrix, Vector};
