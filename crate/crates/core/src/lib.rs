//! Simulation of a stateful serverless object platform: classes with
//! declarative service levels, an object grid over a function execution
//! plane, replica consistency, macro dataflows and deployment planning.

// Negated float comparisons are how NaN gets rejected here.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consistency;
pub mod dataflow;
pub mod faas;
pub mod grid;
pub mod package;
pub mod planner;
pub mod sim;
pub mod workload;
