//! Coordinated sub-transmission / distribution volt-var control co-simulation.
//!
//! The crate models one sub-transmission grid with radial feeders hanging
//! from it, and runs a fixed-cadence control loop between a transmission-side
//! optimizer ([`ems`]) and per-feeder distribution controllers ([`dms`]) over
//! a discrete-event communication network ([`comms`]). The [`coordinator`]
//! drives the loop interval by interval and accounts for the time every
//! solve and message consumes.
//!
//! Numerical kernels ([`powerflow`], [`vlsm`], [`linalg`]) are generic over
//! [`Scalar`]; the aliases below fix them to `f64`, which is what the
//! controllers and the simulation use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod comms;
pub mod coordinator;
pub mod dms;
pub mod ems;
pub mod linalg;
pub mod model;
pub mod network;
pub mod powerflow;
pub mod reference;
pub mod scalar;
pub mod scenario;
pub mod vlsm;

pub use scalar::Scalar;

/// Working precision of the simulation.
pub type Real = f64;
pub type Matrix = linalg::Matrix<Real>;
pub type Network = network::Network<Real>;
pub type PowerFlowSolution = powerflow::PowerFlowSolution<Real>;
pub type SolverOptions = powerflow::SolverOptions<Real>;

pub type VlsMatrix = vlsm::VlsMatrix<Real>;
