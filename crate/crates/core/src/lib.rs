//! Parameter-server synchronization laboratory.
//!
//! The crate pairs a small MLP learner with five synchronization models (BSP,
//! ASP, SSP, round-robin R²SP and the two-stage OSP protocol) and runs them
//! over a deterministic discrete-event model of the parameter server's
//! network links. Runs produce per-iteration metrics and summaries that can
//! be compared across protocols.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod harness;
pub mod importance;
pub mod learner;
pub mod metrics;
pub mod netsim;
pub mod param;
pub mod protocol;
pub mod seed;
pub mod tuning;
