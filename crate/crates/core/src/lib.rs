//! Synthesis and verification of piecewise-constant controls for neural ODEs
//!
//! The state follows `x' = sum_i w_i * relu(a_i . x + b_i)` where the neuron
//! parameters `(w_i, a_i, b_i)` are constant on each piece of a time grid.
//! This crate constructs such schedules explicitly for three tasks:
//!
//! * finite interpolation: steer every input point of a dataset onto its
//!   target ([`interp`], [`shallow`]),
//! * approximate interpolation with a fitted shallow field and an a
//!   posteriori error certificate ([`field_approx`]),
//! * transport of a compactly supported particle measure onto the uniform
//!   measure on the unit cube with a Wasserstein bound ([`transport`]).
//!
//! Every construction is checked by replaying the synthesized schedule
//! through the adaptive integrator in [`flow`], which is deliberately
//! independent of the closed forms used during synthesis.

pub mod error;
pub mod field_approx;
pub mod flow;
pub mod interp;
pub mod model;
pub mod shallow;
pub mod transport;

mod linalg;
mod roots;
mod vecmath;

pub use error::{Error, Result};
pub use model::{complexity, eval_field, ArchitectureSpec, ControlSchedule, Dataset, Neuron, Piece};
