//! Fixtures shared by the benchmarks.

use std::path::PathBuf;
use std::sync::Arc;

use chap_core::config::PlatformConfig;
use chap_core::mesh::{Topology, TopologySpec, Workload};
use chap_core::orchestrator::Platform;
use chap_core::safety::FixedClock;
use chrono::{TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A platform on `topology` (a file under `configs/`), Monday 10:00 UTC.
pub fn platform(topology: &str, request_rate: f64) -> Platform {
    let spec = TopologySpec::load(&configs_dir().join(topology)).expect("example topology");
    let cfg = PlatformConfig {
        workload: Workload {
            users: 100_000,
            request_rate,
        },
        ..PlatformConfig::default()
    };
    let clock = Arc::new(FixedClock::new(
        Utc.with_ymd_and_hms(2024, 6, 3, 10, 0, 0).unwrap(),
    ));
    Platform::with_topology(cfg, Topology::new(spec).expect("valid topology"), clock)
        .expect("platform")
}

/// Latency-like samples; the canary's median is `shift` times the baseline's.
pub fn samples(n: usize, shift: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = LogNormal::new(3.0, 0.4).unwrap();
    let canary = LogNormal::new(3.0 + shift.ln(), 0.4).unwrap();
    let b = (0..n).map(|_| base.sample(&mut rng)).collect();
    let c = (0..n).map(|_| canary.sample(&mut rng)).collect();
    (b, c)
}
