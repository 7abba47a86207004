#![allow(dead_code)]

pub mod oracles;

use std::path::PathBuf;
use std::sync::Arc;

use chap_core::config::PlatformConfig;
use chap_core::mesh::{Topology, TopologySpec, Workload};
use chap_core::orchestrator::Platform;
use chap_core::safety::FixedClock;
use chrono::{DateTime, TimeZone, Utc};

/// 2024-06-03, a Monday.
pub fn monday_10am() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 6, 3, 10, 0, 0).unwrap()
}

pub fn clock() -> Arc<FixedClock> {
    Arc::new(FixedClock::new(monday_10am()))
}

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

pub fn topology_spec(name: &str) -> TopologySpec {
    TopologySpec::load(&config_path(name)).unwrap()
}

pub fn platform_config(seed: u64, rate: f64) -> PlatformConfig {
    PlatformConfig {
        seed,
        workload: Workload {
            users: 100_000,
            request_rate: rate,
        },
        ..PlatformConfig::default()
    }
}

pub fn platform(spec: TopologySpec, config: PlatformConfig, clock: Arc<FixedClock>) -> Platform {
    Platform::with_topology(config, Topology::new(spec).unwrap(), clock).unwrap()
}

use chap_core::fit::{FaultRule, InjectionPoint};
use chap_core::mesh::topology::Criticality;
use chap_core::orchestrator::ExperimentDefinition;

pub fn definition(fault: FaultRule, sampling_pct: f64, duration_secs: u64) -> ExperimentDefinition {
    ExperimentDefinition {
        fault,
        observed_cluster: "api".into(),
        sampling_pct,
        duration_secs,
        region: None,
    }
}

/// Failure injection on the bookmarks client, two minutes.
pub fn bookmarks_failure(sampling_pct: f64) -> ExperimentDefinition {
    definition(
        FaultRule::fail(InjectionPoint::rpc_client("bookmarks")),
        sampling_pct,
        120,
    )
}

/// Bookmarks topology with the fallback removed and the result required.
pub fn bookmarks_without_fallback() -> TopologySpec {
    let mut spec = topology_spec("bookmarks.toml");
    let api = spec.service_mut("api").unwrap();
    api.commands[0].has_fallback = false;
    api.clients[0].criticality_of_result = Criticality::Required;
    spec
}
