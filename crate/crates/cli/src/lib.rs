//! Experiment orchestration over the core library: configuration, stage
//! runners, parallel sweeps and report aggregation. The `drnm` binary is a
//! thin wrapper over these functions.

pub mod config;
pub mod experiment;
pub mod parallel;
pub mod report;
