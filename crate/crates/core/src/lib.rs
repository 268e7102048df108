//! Core library for the stratus scientific-workflow platform.
//!
//! The crate is split along the platform's subsystems:
//!
//! - [`catalog`]: multi-provider instance catalog, capability-based selection and cost estimation.
//! - [`workflow`]: versioned workflow templates, parameter resolution and command rendering.
//! - [`execution`]: provisioning plans, MPI launch envelopes and the job lifecycle state machine.
//! - [`backends`]: a local-process backend and a deterministic cloud simulator.
//! - [`results`]: content-addressed provenance records and run analytics.
//! - [`governance`]: workspaces, group permissions and shared budgets.

pub mod backends;
pub mod catalog;
pub mod execution;
pub mod governance;
pub mod money;
pub mod results;
pub mod workflow;

pub use money::Money;
