//! Modeling and simulation of multi-priority MapReduce clusters that trade
//! accuracy for latency by dropping tasks, optionally combined with power
//! sprinting.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arrivals;
pub mod deflator;
pub mod document;
pub mod exec;
pub mod job_model;
pub mod phase_type;
pub mod presets;
pub mod simulator;

pub use exec::Execution;
