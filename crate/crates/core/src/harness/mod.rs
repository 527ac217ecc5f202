//! Load generation, metric collection, and run orchestration.

pub mod config;
pub mod dispatcher;
pub mod metrics;
pub mod orchestrate;
pub mod signals;
pub mod workload;
