//! Power-system toolkit for voltage-stability-constrained operation studies.
//!
//! The crate models a transmission grid in per-unit, solves AC power flow
//! (Newton-Raphson, polar form) with optional FACTS devices represented by
//! their decomposed power-injection model, evaluates the Kessel-Glavitsch
//! L voltage-stability index at load buses, and minimizes total real load
//! curtailment subject to stability, thermal, voltage and device limits
//! with a primal-dual interior-point solver.
//!
//! Conventions used throughout:
//!
//! * all electrical quantities are per-unit on the system MVA base;
//! * angles are radians internally, degrees at I/O boundaries;
//! * a FACTS shunt quadrature current of magnitude `i_q` lags the internal
//!   node voltage by 90 degrees, so its reactive injection at the terminal
//!   bus is `-|V_i + V_t| * i_q` (positive `i_q` absorbs).

pub mod admittance;
pub mod caseio;
pub mod cli;
pub mod curtailopf;
pub mod facts;
pub mod lindex;
pub mod netmodel;
pub mod powerflow;
pub mod study;

pub use netmodel::{Branch, Bus, BusKind, Generator, Load, Network, ValidationReport};
pub use powerflow::{PowerFlowOptions, PowerFlowSolution};
