//! One line per acceptance criterion; exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::panic::AssertUnwindSafe;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use chap_core::analysis::mann_whitney::{exact_p, mann_whitney};
use chap_core::analysis::Overall;
use chap_core::api::{PlatformService, RecordStore, ServiceOptions};
use chap_core::edge::{assign_group, ExperimentEvent};
use chap_core::fit::{ExperimentId, FaultRule, GroupRole, InjectionPoint, UserId};
use chap_core::mesh::{Topology, TopologySpec};
use chap_core::monocle::schedule::{schedule, History, HistoryEntry};
use chap_core::monocle::{
    criticality_score, generate, prioritization_score, safety_score, DependencySnapshot, ExpType,
    LinkedDependency,
};
use chap_core::orchestrator::{
    canary_size, AbortReason, AuditKind, Experiment, ExperimentState, OrchestratorError, Platform,
};
use chap_core::safety::{preflight, FixedClock, RegionState, RejectReason, SafetyConfig};
use chap_core::telemetry::{Counts, LatencySummary, KPI_SUCCESS};
use chrono::{Duration, TimeZone, Utc};
use common::oracles::{
    check_schedule, naive_criticality, naive_priority, naive_safety, permutation_p, random_snapshot,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn legal(e: &Experiment) -> bool {
    let aborting = e.abort_reason.is_some();
    let mut state = ExperimentState::Created;
    for a in &e.audit {
        if let AuditKind::Transition { from, to } = a.kind {
            if from != state || !from.can_transition(to, aborting) {
                return false;
            }
            state = to;
        }
    }
    state == e.state
}

fn chap_vips(p: &Platform) -> Vec<String> {
    p.sim()
        .live_vips()
        .into_iter()
        .filter(|v| v.contains("-chap-"))
        .collect()
}

fn threadpool_run(p: &mut Platform) -> Result<(u64, u64, Option<u64>, Experiment), String> {
    let plan = p.plan("api").map_err(|e| e.to_string())?;
    let g = plan
        .into_iter()
        .find(|g| g.key() == "api/command:GetRecs/latency_below_timeout")
        .ok_or("no latency_below_timeout plan for GetRecs")?;
    let id = p
        .create(common::definition(g.fault(), 1.0, 60))
        .map_err(|e| e.to_string())?;
    p.start(&id).map_err(|e| e.to_string())?;
    let pair = p.experiment(&id).unwrap().clusters.clone().unwrap();
    ensure!(p.run_until_settled(2000), "experiment did not settle");
    let rejected = |c: &str| {
        p.sim()
            .command_counters(c, "GetRecs")
            .map_or(0, |c| c.thread_pool_rejected)
    };
    Ok((
        rejected(&pair.canary),
        rejected(&pair.baseline),
        g.injected_latency_ms,
        p.experiment(&id).unwrap().clone(),
    ))
}

fn threadpool() -> Outcome {
    let t = Instant::now();
    let rate = 1500.0;
    let mut p = common::platform(
        common::topology_spec("threadpool.toml"),
        common::platform_config(3, rate),
        common::clock(),
    );
    p.run_for(30);
    let (canary, baseline, injected, e) = threadpool_run(&mut p)?;
    let injected = injected.unwrap_or(0);
    ensure!(
        (800..=1000).contains(&injected),
        "injected {injected} ms, expected about 900"
    );
    ensure!(
        canary > 0 && baseline == 0,
        "rejections canary={canary} baseline={baseline}"
    );
    let warned = e.verdict.as_ref().is_some_and(|v| {
        v.warnings
            .iter()
            .any(|w| w.starts_with("countThreadPoolRejected"))
    });
    ensure!(warned, "rejections were not flagged in the verdict");

    // each canary instance sees rate * sampling / size requests a second;
    // holding a slot longer than bulkhead / arrival exhausts the pool
    let size = e.clusters.as_ref().unwrap().size as f64;
    let arrival = rate * e.definition.sampling_pct / 100.0 / size;
    let saturation_ms = 10.0 / arrival * 1000.0;
    let new_timeout = 150u64;
    ensure!(
        (new_timeout as f64) < saturation_ms,
        "{new_timeout} ms is not below saturation at {saturation_ms:.0} ms"
    );
    p.set_property(
        "api",
        "command.GetRecs.timeout_ms",
        &new_timeout.to_string(),
    )
    .map_err(|e| e.to_string())?;
    p.set_property("api", "client.recs.timeout_ms", "70")
        .map_err(|e| e.to_string())?;
    p.run_for(30);
    let (canary2, baseline2, injected2, _) = threadpool_run(&mut p)?;
    ensure!(
        canary2 == 0 && baseline2 == 0,
        "rerun rejections canary={canary2} baseline={baseline2}"
    );
    let wall = t.elapsed().as_secs_f64();
    ensure!(wall < 10.0, "took {wall:.1} s");
    Ok(format!(
        "injected {injected} ms: canary rejected {canary}, baseline 0; timeout {new_timeout} ms (saturation {saturation_ms:.0} ms), \
         reinjected {} ms: 0 rejections; {wall:.2} s",
        injected2.unwrap_or(0)
    ))
}

fn bookmarks_run(spec: TopologySpec, seed: u64) -> Experiment {
    let mut p = common::platform(spec, common::platform_config(seed, 1000.0), common::clock());
    p.run_for(30);
    let id = p.create(common::bookmarks_failure(1.0)).unwrap();
    p.start(&id).unwrap();
    p.run_until_settled(2000);
    assert!(chap_vips(&p).is_empty());
    p.experiment(&id).unwrap().clone()
}

fn bookmarks() -> Outcome {
    let alpha = chap_core::analysis::DEFAULT_ALPHA;
    let ok = bookmarks_run(common::topology_spec("bookmarks.toml"), 7);
    let v = ok.verdict.as_ref().ok_or("no verdict")?;
    ensure!(
        ok.state == ExperimentState::Completed && v.overall == Overall::Pass,
        "fallback run {:?} {:?}",
        ok.state,
        v.overall
    );
    let p_sps = v
        .comparison("sps_success_rate")
        .and_then(|c| c.p_value)
        .ok_or("no sps comparison")?;
    ensure!(p_sps >= alpha, "sps p={p_sps}");

    let bad = bookmarks_run(common::bookmarks_without_fallback(), 7);
    let v = bad.verdict.as_ref().ok_or("no verdict")?;
    let ran = bad.ended_at.unwrap() - bad.started_at.unwrap();
    ensure!(
        v.overall == Overall::Fail,
        "required run verdict {:?}",
        v.overall
    );
    ensure!(
        bad.abort_reason == Some(AbortReason::AutoStop),
        "abort reason {:?}",
        bad.abort_reason
    );
    ensure!(ran < bad.definition.duration_secs, "ran the full {ran} s");
    ensure!(
        bad == bookmarks_run(common::bookmarks_without_fallback(), 7),
        "replay under the same seed differs"
    );
    ensure!(
        ok == bookmarks_run(common::topology_spec("bookmarks.toml"), 7),
        "replay under the same seed differs"
    );
    Ok(format!("fallback: Pass, sps p={p_sps:.3}; required: Fail, auto-stop after {ran} of 120 s; replays identical"))
}

fn sizing() -> Outcome {
    ensure!(
        canary_size(180, 1.0) == 2,
        "180 at 1% gives {}",
        canary_size(180, 1.0)
    );
    let mut p = common::platform(
        common::topology_spec("bookmarks.toml"),
        common::platform_config(2, 500.0),
        common::clock(),
    );
    let id = p.create(common::bookmarks_failure(1.0)).unwrap();
    p.start(&id).unwrap();
    p.run_for(5);
    let pair = p.experiment(&id).unwrap().clusters.clone().unwrap();
    ensure!(
        pair.baseline_vip == "api-chap-baseline" && pair.canary_vip == "api-chap-canary",
        "{pair:?}"
    );
    let want = p.sim().cluster_properties("api").unwrap();
    for name in [&pair.baseline, &pair.canary] {
        let c = p.sim().cluster(name).ok_or("cluster missing")?;
        ensure!(
            c.instances.len() == 2,
            "{name} has {} instances",
            c.instances.len()
        );
        for &i in &c.instances {
            let seen = p
                .sim()
                .first_request_properties(i)
                .ok_or(format!("{name}/{i} saw no request"))?;
            ensure!(seen == want, "{name}/{i} first request saw {seen:?}");
        }
    }
    Ok("180 instances at 1% -> 2 per cluster; -chap-baseline/-chap-canary vips; properties set before first request".into())
}

fn snap(kind: chap_core::fit::InjectionKind, pct: f64) -> DependencySnapshot {
    DependencySnapshot {
        cluster: "api".into(),
        kind,
        name: "d".into(),
        trigger_pct: pct,
        latencies: Some(LatencySummary {
            mean: 1.0,
            p90: 1.0,
            p99: 1.0,
            p99_5: 1.0,
        }),
        max_rps: 1.0,
        timeout_ms: 1000,
        retries: (kind == chap_core::fit::InjectionKind::RpcClient).then_some(0),
        bulkhead_size: None,
        observed_active_slots: None,
        has_fallback: true,
        fallback_observed_success: true,
        wrapped_by: vec![],
        wraps: vec![],
        known_impacts: vec![],
        collected_at: Some(chap_core::mesh::SimTime::from_secs(1)),
        blacklisted: false,
    }
}

fn scoring() -> Outcome {
    use chap_core::fit::InjectionKind::{Command, RpcClient};
    let link = |r| LinkedDependency {
        name: "c".into(),
        timeout_ms: 10,
        retries: r,
        has_fallback: true,
    };
    let mut a = snap(Command, 5.0);
    a.wraps = vec![link(0), link(0)];
    let mut c = snap(RpcClient, 50.0);
    c.retries = Some(3);
    c.wrapped_by = vec![link(0)];
    let got = [
        criticality_score(&a),
        criticality_score(&snap(RpcClient, 0.05)),
        criticality_score(&c),
    ];
    ensure!(
        got == [Ok(20_000), Ok(0), Ok(4_000)],
        "worked criticality examples gave {got:?}"
    );
    let pr = [
        prioritization_score(20_000, 1, ExpType::Failure),
        prioritization_score(20_000, -1, ExpType::Failure),
    ];
    ensure!(
        pr == [60_000, -20_000],
        "worked priority examples gave {pr:?}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..1000 {
        let s = random_snapshot(&mut rng);
        let crit = criticality_score(&s).ok();
        ensure!(
            crit == naive_criticality(&s),
            "snapshot {i}: criticality {crit:?} vs {:?}",
            naive_criticality(&s)
        );
        for t in ExpType::ALL {
            let safety = safety_score(&s, t).score;
            ensure!(
                safety == naive_safety(&s, t),
                "snapshot {i} {t:?}: safety {safety}"
            );
            let c = crit.unwrap_or(0);
            ensure!(
                prioritization_score(c, safety, t) == naive_priority(c, safety, t),
                "snapshot {i} {t:?}: priority"
            );
        }
    }
    Ok("worked examples exact; 1000 random snapshots agree with the brute-force scorer".into())
}

fn ordering() -> Outcome {
    let now = common::monday_10am();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut total = 0;
    for case in 0..500 {
        let snaps: Vec<_> = (0..rng.random_range(0..12))
            .map(|_| random_snapshot(&mut rng))
            .collect();
        let plans = generate(&snaps);
        let mut history = History::default();
        for p in &plans {
            if rng.random_bool(0.4) {
                *history.entry(&p.key()) = HistoryEntry {
                    last_run: rng
                        .random_bool(0.7)
                        .then(|| now - Duration::hours(rng.random_range(0..24 * 20))),
                    running: rng.random_bool(0.2),
                    failed_unreviewed: rng.random_bool(0.2),
                };
            }
        }
        let cooldown = rng.random_range(0..14);
        let out = schedule(&plans, &history, cooldown, now);
        check_schedule(&plans, &history, cooldown, now, &out)
            .map_err(|e| format!("case {case}: {e}"))?;
        total += out.len();
    }
    Ok(format!(
        "500 randomized cases sorted, positive-only, exclusions respected ({total} scheduled)"
    ))
}

fn mw_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for n1 in 1..=8 {
        for n2 in 1..=8 {
            for hi in [3, 8, 50] {
                let b: Vec<f64> = (0..n1).map(|_| rng.random_range(0..hi) as f64).collect();
                let c: Vec<f64> = (0..n2).map(|_| rng.random_range(0..hi) as f64).collect();
                let d = (exact_p(&b, &c).unwrap() - permutation_p(&b, &c)).abs();
                ensure!(d <= 1e-12, "n1={n1} n2={n2}: off by {d}");
                worst = worst.max(d);
            }
        }
    }
    for i in 0..1000 {
        let n1 = rng.random_range(1..30);
        let n2 = rng.random_range(1..30);
        let b: Vec<f64> = (0..n1).map(|_| rng.random_range(0..40) as f64).collect();
        let c: Vec<f64> = (0..n2).map(|_| rng.random_range(0..40) as f64).collect();
        let r = mann_whitney(&b, &c, 0.05).unwrap();
        let tb: Vec<f64> = b.iter().map(|v| (v / 3.0).exp()).collect();
        let tc: Vec<f64> = c.iter().map(|v| (v / 3.0).exp()).collect();
        let t = mann_whitney(&tb, &tc, 0.05).unwrap();
        ensure!(
            r.u == t.u && r.p_value == t.p_value,
            "case {i}: not rank invariant"
        );
        let s = mann_whitney(&c, &b, 0.05).unwrap();
        ensure!(
            (r.p_value - s.p_value).abs() < 1e-12 && r.u + s.u == (n1 * n2) as f64,
            "case {i}: not symmetric"
        );
    }
    Ok(format!("all 64 size pairs within {worst:.1e} of brute force; 1000 invariance and symmetry cases hold"))
}

fn sampling() -> Outcome {
    let ev = ExperimentEvent {
        experiment_id: ExperimentId::new("exp-000001"),
        sampling_pct: 1.0,
        fault: FaultRule::fail(InjectionPoint::rpc_client("bookmarks")),
        vip_original: "api".into(),
        vip_baseline: "api-chap-baseline".into(),
        vip_canary: "api-chap-canary".into(),
    };
    let split = || {
        let (mut b, mut c) = (HashSet::new(), HashSet::new());
        for u in 0..1_000_000u64 {
            match assign_group(UserId(u), &ev) {
                GroupRole::Baseline => b.insert(u),
                GroupRole::Canary => c.insert(u),
                GroupRole::None => false,
            };
        }
        (b, c)
    };
    let (b, c) = split();
    let (pb, pc) = (b.len() as f64 / 1e4, c.len() as f64 / 1e4);
    ensure!(
        (pb - 1.0).abs() <= 0.1 && (pc - 1.0).abs() <= 0.1,
        "shares {pb}% / {pc}%"
    );
    ensure!(b.is_disjoint(&c), "groups overlap");
    ensure!(split() == (b, c), "replay differs");
    Ok(format!(
        "baseline {pb:.3}%, canary {pc:.3}% of 1M users; disjoint; stable on replay"
    ))
}

fn safety_gates() -> Outcome {
    let cfg = SafetyConfig::default();
    let region = |impact, failover| RegionState {
        region: "r".into(),
        failover_in_progress: failover,
        active_impact_pct: impact,
        ..Default::default()
    };
    let at = |d, h| Utc.with_ymd_and_hms(2024, 6, d, h, 0, 0).unwrap();
    let table = [
        (at(1, 11), 0.0, false, 1.0, Err(RejectReason::BusinessHours)),
        (at(2, 15), 0.0, false, 1.0, Err(RejectReason::BusinessHours)),
        (at(3, 17), 0.0, false, 1.0, Err(RejectReason::BusinessHours)),
        (at(3, 11), 0.0, false, 1.0, Ok(())),
        (at(3, 11), 4.0, false, 1.0, Err(RejectReason::TrafficBudget)),
        (at(3, 11), 4.0, false, 0.5, Ok(())),
        (at(3, 11), 0.0, true, 1.0, Err(RejectReason::Failover)),
    ];
    for (i, (t, impact, failover, pct, want)) in table.into_iter().enumerate() {
        let got = preflight(pct, &region(impact, failover), t, &cfg);
        ensure!(got == want, "row {i}: {got:?} != {want:?}");
    }
    let mut p = common::platform(
        common::topology_spec("bookmarks.toml"),
        common::platform_config(2, 10.0),
        common::clock(),
    );
    p.set_failover("us-east-1", true)
        .map_err(|e| e.to_string())?;
    let id = p.create(common::bookmarks_failure(1.0)).unwrap();
    ensure!(
        matches!(
            p.start(&id),
            Err(OrchestratorError::Safety(RejectReason::Failover))
        ),
        "failover did not reject"
    );
    ensure!(
        p.sim().edge().active().is_empty(),
        "event was published during failover"
    );
    Ok("weekend and after-hours rejected; 4%+2% rejected; failover blocks publish".into())
}

fn telemetry() -> Outcome {
    let mut cfg = common::platform_config(21, 2800.0);
    cfg.analysis.availability_delay_secs = 20;
    cfg.orchestrator.pause_traffic_when_idle = false;
    let mut p = common::platform(
        common::topology_spec("bookmarks.toml"),
        cfg,
        common::clock(),
    );
    p.sim().enable_kpi_log();
    let mut ids = Vec::new();
    p.run_for(5);
    for fault in [
        FaultRule::fail(InjectionPoint::rpc_client("bookmarks")),
        FaultRule::latency(InjectionPoint::command("GetBookmarks"), 100),
        FaultRule::fail(InjectionPoint::rpc_client("playback")),
        FaultRule::latency(InjectionPoint::rpc_client("bookmarks"), 50),
    ] {
        let id = p.create(common::definition(fault, 2.0, 40)).unwrap();
        p.start(&id).unwrap();
        p.run_until_settled(200);
        ids.push(id);
    }
    let log = p.sim().take_kpi_log();
    ensure!(log.len() >= 500_000, "only {} requests", log.len());
    let mut emitted: BTreeMap<(ExperimentId, GroupRole), BTreeMap<String, Counts>> =
        BTreeMap::new();
    for ev in &log {
        if let Some(e) = ev.group.experiment() {
            emitted
                .entry((e.clone(), ev.group.role()))
                .or_default()
                .entry(ev.channel.clone())
                .or_default()
                .add(ev.success);
        }
    }
    {
        let t = p.sim().telemetry();
        for id in &ids {
            for role in [GroupRole::Baseline, GroupRole::Canary] {
                let want = emitted
                    .get(&(id.clone(), role))
                    .cloned()
                    .unwrap_or_default();
                ensure!(
                    !want.is_empty() && t.stream.totals(id, role) == want,
                    "{id} {role}: stream totals differ"
                );
            }
        }
    }

    let mut q = common::platform(
        common::topology_spec("bookmarks.toml"),
        common::platform_config(4, 200.0),
        common::clock(),
    );
    for _ in 0..8 {
        q.run_for(100);
        let now = q.sim().now();
        let t = q.sim().telemetry();
        for k in t.aggregates.keys() {
            if let Some(s) = t.aggregates.query(k, 0, u64::MAX / 2, now) {
                if let Some(&(last, _)) = s.points.last() {
                    ensure!(
                        last + 300 <= now.second(),
                        "{} point at {last}, now {}",
                        k.metric,
                        now.second()
                    );
                }
            }
        }
    }
    let key =
        chap_core::telemetry::Telemetry::kpi_key(KPI_SUCCESS, "sps", &chap_core::fit::Group::None);
    ensure!(
        q.sim()
            .telemetry()
            .aggregates
            .query(&key, 0, 10_000, q.sim().now())
            .is_some(),
        "no sps series"
    );
    Ok(format!("{} requests: stream totals equal emitted KPI events for {} experiments; no aggregate point newer than now-300", log.len(), ids.len()))
}

const TINY: &str = r#"
edge_service = "api"
[[services]]
name = "api"
vip = "api"
cluster_size = 4
[[services.clients]]
name = "dep"
target_vip = "dep"
per_try_timeout_ms = 100
criticality_of_result = "required"
[[services.commands]]
name = "Call"
timeout_ms = 200
has_fallback = false
wrapped_clients = ["dep"]
[[services.handlers]]
name = "h"
kpi = "sps"
steps = [{ command = "Call" }]
[[services]]
name = "dep"
vip = "dep"
cluster_size = 2
[[services.handlers]]
name = "get"
"#;

fn lifecycle() -> Outcome {
    let mut endings: BTreeMap<String, usize> = BTreeMap::new();
    for case in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case ^ 0xabcdef);
        let mut cfg = common::platform_config(case, 12.0);
        cfg.workload.users = 500;
        cfg.safety.max_total_traffic_pct = 100.0;
        cfg.safety.auto_stop.window_secs = 5;
        cfg.safety.auto_stop.min_events = 10;
        cfg.analysis.availability_delay_secs = 3;
        cfg.orchestrator.drain_timeout_secs = 2;
        let topo = Topology::new(TopologySpec::from_toml_str(TINY).unwrap()).unwrap();
        let mut p = Platform::with_topology(cfg, topo, common::clock()).unwrap();
        let fault = if rng.random_bool(0.5) {
            FaultRule::fail(InjectionPoint::rpc_client("dep"))
        } else {
            FaultRule::latency(InjectionPoint::rpc_client("dep"), 5)
        };
        let id = p
            .create(common::definition(fault, 40.0, rng.random_range(2..12)))
            .unwrap();
        p.start(&id).unwrap();
        for _ in 0..rng.random_range(1..6) {
            match rng.random_range(0..10) {
                0..=5 => p.run_for(rng.random_range(1..5)),
                6 | 7 => {
                    let _ = p.abort(&id, AbortReason::Manual);
                }
                8 => {
                    let _ = p.fail_experiment(&id, "injected");
                }
                _ => {
                    let _ = p.set_failover("us-east-1", rng.random_bool(0.5));
                }
            }
        }
        ensure!(p.run_until_settled(200), "case {case} did not settle");
        let e = p.experiment(&id).unwrap();
        ensure!(
            e.state.is_terminal() && legal(e),
            "case {case}: illegal history {:?}",
            e.audit
        );
        ensure!(
            chap_vips(&p).is_empty(),
            "case {case}: leaked {:?}",
            chap_vips(&p)
        );
        let label = match e.abort_reason {
            Some(r) => format!("{}/{r:?}", e.state),
            None => e.state.to_string(),
        };
        *endings.entry(label).or_default() += 1;
    }
    for want in [
        "Completed",
        "Failed",
        "Aborted/Manual",
        "Aborted/AutoStop",
        "Aborted/SafetyViolation",
    ] {
        ensure!(
            endings.keys().any(|k| k.starts_with(want)),
            "{want} never reached: {endings:?}"
        );
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = common::platform_config(5, 200.0);
    cfg.topology = Some(common::topology_spec("bookmarks.toml"));
    let opts = ServiceOptions {
        acceleration: 0.0,
        warmup_secs: 5,
    };
    let clock: Arc<FixedClock> = common::clock();
    let svc = PlatformService::start(
        cfg.clone(),
        Some(RecordStore::open(dir.path()).unwrap()),
        clock.clone(),
        opts.clone(),
    )
    .map_err(|e| e.to_string())?;
    let h = svc.handle();
    let id = h
        .call_blocking(|p| {
            let id = p.create(common::bookmarks_failure(1.0)).unwrap();
            p.start(&id).unwrap();
            p.run_for(10);
            id
        })
        .map_err(|e| e.to_string())?;
    ensure!(
        h.snapshot().experiments[&id].state == ExperimentState::Running,
        "not running before the kill"
    );
    svc.kill();
    let svc = PlatformService::start(
        cfg,
        Some(RecordStore::open(dir.path()).unwrap()),
        clock,
        opts,
    )
    .map_err(|e| e.to_string())?;
    let left = svc
        .handle()
        .call_blocking(|p| chap_vips(p))
        .map_err(|e| e.to_string())?;
    ensure!(left.is_empty(), "vips left after restart: {left:?}");
    ensure!(
        svc.recovered == vec![id.clone()],
        "recovered {:?}",
        svc.recovered
    );
    ensure!(
        svc.handle().snapshot().experiments[&id].state == ExperimentState::Failed,
        "interrupted run not failed"
    );
    svc.shutdown();
    let summary: Vec<String> = endings.iter().map(|(k, v)| format!("{k} {v}")).collect();
    Ok(format!(
        "10000 fuzz cases legal ({}); kill during Running leaves no -chap- vips",
        summary.join(", ")
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("threadpool saturation", threadpool),
        ("bookmarks scenario", bookmarks),
        ("cluster sizing", sizing),
        ("scoring oracle", scoring),
        ("ordering properties", ordering),
        ("mann-whitney exactness", mw_exactness),
        ("sampling", sampling),
        ("safety gates", safety_gates),
        ("telemetry conservation", telemetry),
        ("lifecycle and crash safety", lifecycle),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
