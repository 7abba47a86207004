//! Chaos experiment platform core.
//!
//! A deterministic, virtual-time model of a microservice mesh whose RPC
//! clients and guarded commands implement timeouts, retries, fallbacks,
//! bulkheads and circuit breaking, together with the control plane that runs
//! failure and latency experiments against it: user sampling at the edge,
//! baseline/canary provisioning, blast-radius guardrails, dual-path
//! telemetry, rank-sum canary judgment, and automatic experiment generation
//! from dependency introspection.

pub mod analysis;
pub mod api;
pub mod config;
pub mod edge;
pub mod error;
pub mod fit;
pub mod mesh;
pub mod monocle;
pub mod orchestrator;
pub mod safety;
pub mod telemetry;

pub use error::{Error, Result};
