//! Brute-force reference implementations, kept deliberately naive.

use chap_core::fit::InjectionKind;
use chap_core::mesh::SimTime;
use chap_core::monocle::schedule::History;
use chap_core::monocle::{DependencySnapshot, ExpType, GeneratedExperiment, LinkedDependency};
use chap_core::telemetry::LatencySummary;
use chrono::{DateTime, Duration, Utc};
use rand::seq::IndexedRandom;
use rand::Rng;

/// U of `b` by direct pair counting.
pub fn pair_u(b: &[f64], c: &[f64]) -> f64 {
    let mut u = 0.0;
    for &x in b {
        for &y in c {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Two-sided permutation p-value over every split of the pooled values.
pub fn permutation_p(b: &[f64], c: &[f64]) -> f64 {
    let pooled: Vec<f64> = b.iter().chain(c).copied().collect();
    let n = pooled.len();
    let n1 = b.len();
    let mean = (n1 * c.len()) as f64 / 2.0;
    let observed = (pair_u(b, c) - mean).abs();
    let mut hit = 0u64;
    let mut total = 0u64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (i, &v) in pooled.iter().enumerate() {
            if mask & (1 << i) != 0 {
                x.push(v);
            } else {
                y.push(v);
            }
        }
        total += 1;
        if (pair_u(&x, &y) - mean).abs() >= observed - 1e-9 {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

pub fn naive_criticality(s: &DependencySnapshot) -> Option<u64> {
    if s.collected_at.is_none() {
        return None;
    }
    let kind = match s.kind {
        InjectionKind::RpcClient => 1,
        InjectionKind::Command => 100,
    };
    let t = s.trigger_pct;
    let bucket = if t < 0.1 {
        0
    } else if t < 1.0 {
        10
    } else if t < 10.0 {
        100
    } else {
        1000
    };
    let retry = match s.kind {
        InjectionKind::RpcClient => 1 + s.retries.unwrap_or(0) as u64,
        InjectionKind::Command => {
            let mut best = 1;
            for w in &s.wraps {
                if 1 + w.retries as u64 > best {
                    best = 1 + w.retries as u64;
                }
            }
            best
        }
    };
    let mut interactions = match s.kind {
        InjectionKind::RpcClient => s.wrapped_by.len() as u64,
        InjectionKind::Command => s.wraps.len() as u64,
    };
    if interactions == 0 {
        interactions = 1;
    }
    Some(kind * bucket * retry * interactions)
}

fn naive_missing_fallback(s: &DependencySnapshot) -> bool {
    match s.kind {
        InjectionKind::Command => !s.has_fallback,
        InjectionKind::RpcClient => s.wrapped_by.iter().any(|c| !c.has_fallback),
    }
}

fn naive_misaligned(s: &DependencySnapshot) -> bool {
    match s.kind {
        InjectionKind::Command => s
            .wraps
            .iter()
            .any(|c| s.timeout_ms < c.timeout_ms * (1 + c.retries as u64)),
        InjectionKind::RpcClient => {
            let total = s.timeout_ms * (1 + s.retries.unwrap_or(0) as u64);
            s.wrapped_by.iter().any(|c| c.timeout_ms < total)
        }
    }
}

pub fn naive_safety(s: &DependencySnapshot, t: ExpType) -> i8 {
    let mut unsafe_ = false;
    if s.blacklisted {
        unsafe_ = true;
    }
    if s.collected_at.is_none() {
        unsafe_ = true;
    }
    if s.kind == InjectionKind::RpcClient && s.wrapped_by.is_empty() {
        unsafe_ = true;
    }
    for k in &s.known_impacts {
        let k = k.trim().to_lowercase();
        if k == "sps" || k == "downloads" || k == "login" || k == "signup" {
            unsafe_ = true;
        }
    }
    let latency = t == ExpType::LatencyBelowTimeout || t == ExpType::LatencyCausingFailure;
    if latency && naive_missing_fallback(s) && naive_misaligned(s) {
        unsafe_ = true;
    }
    if t == ExpType::Failure && naive_missing_fallback(s) {
        unsafe_ = true;
    }
    if unsafe_ {
        -1
    } else {
        1
    }
}

pub fn naive_priority(criticality: u64, safety: i8, t: ExpType) -> i64 {
    let w = if safety > 0 {
        match t {
            ExpType::Failure => 3,
            ExpType::LatencyBelowTimeout => 2,
            ExpType::LatencyCausingFailure => 1,
        }
    } else {
        match t {
            ExpType::Failure => 1,
            ExpType::LatencyBelowTimeout => 2,
            ExpType::LatencyCausingFailure => 3,
        }
    };
    criticality as i64 * safety as i64 * w
}

const NAMES: [&str; 6] = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot"];
const IMPACTS: [&str; 7] = [
    "sps",
    "SPS",
    "downloads",
    "login",
    "signup",
    "search",
    "artwork",
];

fn link<R: Rng>(rng: &mut R, client: bool) -> LinkedDependency {
    LinkedDependency {
        name: NAMES.choose(rng).unwrap().to_string(),
        timeout_ms: rng.random_range(10..3000),
        retries: if client { rng.random_range(0..4) } else { 0 },
        has_fallback: !client && rng.random_bool(0.6),
    }
}

pub fn random_snapshot<R: Rng>(rng: &mut R) -> DependencySnapshot {
    let command = rng.random_bool(0.5);
    // mostly around bucket edges, sometimes anywhere
    let trigger_pct = if rng.random_bool(0.3) {
        *[0.0, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0, 50.0, 100.0]
            .choose(rng)
            .unwrap()
    } else {
        rng.random_range(0.0..100.0)
    };
    let p99 = rng.random_range(0.0..2000.0);
    let n_links = rng.random_range(0..4);
    let links: Vec<LinkedDependency> = (0..n_links).map(|_| link(rng, command)).collect();
    let n_impacts = rng.random_range(0..3);
    DependencySnapshot {
        cluster: "api".into(),
        kind: if command {
            InjectionKind::Command
        } else {
            InjectionKind::RpcClient
        },
        name: NAMES.choose(rng).unwrap().to_string(),
        trigger_pct,
        latencies: rng.random_bool(0.9).then_some(LatencySummary {
            mean: p99 / 2.0,
            p90: p99 * 0.8,
            p99,
            p99_5: p99,
        }),
        max_rps: rng.random_range(0.0..1000.0),
        timeout_ms: rng.random_range(10..4000),
        retries: (!command).then(|| rng.random_range(0..4)),
        bulkhead_size: command.then_some(10),
        observed_active_slots: command.then(|| rng.random_range(0..11)),
        has_fallback: rng.random_bool(0.6),
        fallback_observed_success: rng.random_bool(0.5),
        wrapped_by: if command { vec![] } else { links.clone() },
        wraps: if command { links } else { vec![] },
        known_impacts: (0..n_impacts)
            .map(|_| IMPACTS.choose(rng).unwrap().to_string())
            .collect(),
        collected_at: rng
            .random_bool(0.9)
            .then(|| SimTime::from_secs(rng.random_range(0..1000))),
        blacklisted: rng.random_bool(0.1),
    }
}

/// Checks the scheduler output against its contract; returns the first
/// violation.
pub fn check_schedule(
    plans: &[GeneratedExperiment],
    history: &History,
    cooldown_days: u32,
    now: DateTime<Utc>,
    out: &[GeneratedExperiment],
) -> Result<(), String> {
    let eligible = |p: &GeneratedExperiment| {
        if p.priority_score <= 0 {
            return false;
        }
        match history.entries.get(&p.key()) {
            None => true,
            Some(h) => {
                !h.running
                    && !h.failed_unreviewed
                    && match h.last_run {
                        None => true,
                        Some(t) => now - t >= Duration::days(cooldown_days as i64),
                    }
            }
        }
    };
    for w in out.windows(2) {
        if w[0].priority_score < w[1].priority_score {
            return Err(format!(
                "not sorted: {} before {}",
                w[0].priority_score, w[1].priority_score
            ));
        }
        if w[0].priority_score == w[1].priority_score && w[0].criticality < w[1].criticality {
            return Err("criticality tie-break violated".into());
        }
        if w[0].priority_score == w[1].priority_score
            && w[0].criticality == w[1].criticality
            && w[0].dependency.name > w[1].dependency.name
        {
            return Err("name tie-break violated".into());
        }
    }
    for p in out {
        if !eligible(p) {
            return Err(format!("{} should have been excluded", p.key()));
        }
    }
    let expected = plans.iter().filter(|p| eligible(p)).count();
    if expected != out.len() {
        return Err(format!("expected {expected} runnable, got {}", out.len()));
    }
    Ok(())
}
