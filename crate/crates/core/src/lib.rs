//! Counterexample-guided optimization of LLM workflow graphs.
//!
//! The optimizer treats a workflow's failures as samples from a density over a
//! failure-signature space and repeatedly removes the densest failure mode with
//! an empirically verified graph edit.

pub mod clustering;
pub mod config;
pub mod diagnosis;
pub mod graph;
pub mod harness;
pub mod mass_oracle;
pub mod optimizer;
pub mod propose;
pub mod report;
pub mod scenario;
pub mod seed;
pub mod signature;
