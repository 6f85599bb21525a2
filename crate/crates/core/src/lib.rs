//! Global optimal control of affine nonlinear multi-agent systems, computed two ways.
//!
//! * [`hjb`] is the centralized oracle: value iteration on the HJB equation of the
//!   stacked system, each linear PDE solved by inverse-multiquadric RBF collocation
//!   ([`rbf`]), plus a Riccati reference for linear-quadratic instances.
//! * [`dva`] is the distributed value approximation. Every agent keeps its own copy of
//!   the global trajectory, vector field and running cost, mixes them with its graph
//!   neighbors only ([`netsim`]), and solves its own linear PDE per round.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, configuration and the
//! command-line driver live in the companion `distopt-sim` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cost;
pub mod dva;
pub mod dynamics;
mod error;
pub mod graph;
pub mod hjb;
mod linalg;
pub mod netsim;
pub mod rbf;

pub use error::{Error, Result};

pub use nalgebra::{DMatrix, DVector, RowDVector};
