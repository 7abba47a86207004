//! Simulated service mesh.

pub mod registry;
pub mod resilience;
pub mod runtime;
pub mod sim;
pub mod topology;

pub use registry::{resolve_vip, ClusterInstance, Registry};
pub use runtime::{Runtime, SimTime};
pub use sim::{
    drive_traffic, CallDetail, CallOutcome, CallStatus, ClusterInfo, CommandCounters,
    EffectiveConfig, ProvisionSpec, SimConfig, SimError, Simulation, Workload,
};
pub use topology::{Topology, TopologyError, TopologySpec};
