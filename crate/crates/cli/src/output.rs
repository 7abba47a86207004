use chap_core::analysis::Overall;
use chap_core::monocle::{GeneratedExperiment, Warning};
use chap_core::orchestrator::{Experiment, ExperimentState, ScheduleRun};
use serde_json::json;

use crate::{Failure, Outcome, EXIT_NOT_PASSED};

pub struct Printer {
    pub json: bool,
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn summary(e: &Experiment) -> String {
    let d = &e.definition;
    let mut line = format!(
        "{}  {:<10} {} on {} ({}%, {}s, {})",
        e.id,
        e.state,
        d.fault.injection_point,
        d.observed_cluster,
        d.sampling_pct,
        d.duration_secs,
        e.region
    );
    if let chap_core::fit::FaultAction::AddLatency { ms } = d.fault.action {
        line.push_str(&format!(" +{ms}ms"));
    }
    if let Some(v) = &e.verdict {
        line.push_str(&format!("  verdict {:?} score {:.1}", v.overall, v.score));
        if v.partial {
            line.push_str(" (partial)");
        }
    }
    line
}

impl Printer {
    pub fn experiment(&self, e: &Experiment) {
        if self.json {
            return print_json(e);
        }
        println!("{}", summary(e));
        if let Some(c) = &e.clusters {
            println!(
                "  clusters  {} / {} ({} instances)",
                c.baseline, c.canary, c.size
            );
        }
        if let Some(r) = &e.abort_reason {
            println!("  aborted   {r:?}");
        }
        if let Some(s) = &e.stop_detail {
            println!("  stopped   {s:?}");
        }
        if let Some(f) = &e.failure {
            println!("  failure   {f}");
        }
        let Some(v) = &e.verdict else { return };
        for c in &v.comparisons {
            let p = c.p_value.map_or("-".to_string(), |p| format!("{p:.3e}"));
            println!(
                "  {:<40} {:<12} p={:<10} n={}/{}{}",
                c.metric_name,
                format!("{:?}", c.classification),
                p,
                c.n_baseline,
                c.n_canary,
                if c.harmful() { "  harmful" } else { "" }
            );
        }
        for w in &v.warnings {
            println!("  warning   {w}");
        }
    }

    pub fn experiments(&self, list: &[Experiment]) {
        if self.json {
            return print_json(&list);
        }
        if list.is_empty() {
            println!("no experiments");
        }
        for e in list {
            println!("{}", summary(e));
        }
    }

    pub fn queue(&self, queue: &[GeneratedExperiment]) {
        if self.json {
            let rows: Vec<_> = queue
                .iter()
                .map(|g| json!({ "key": g.key(), "experiment": g }))
                .collect();
            return print_json(&rows);
        }
        if queue.is_empty() {
            println!("nothing to run");
        }
        for g in queue {
            println!("{:>6}  {}", g.priority_score, g.key());
        }
    }

    pub fn plans(&self, plans: &[(String, Vec<GeneratedExperiment>, Vec<Warning>)]) {
        if self.json {
            let v: Vec<_> = plans
                .iter()
                .map(|(c, plan, warnings)| {
                    let rows: Vec<_> = plan
                        .iter()
                        .map(|g| json!({ "key": g.key(), "experiment": g }))
                        .collect();
                    json!({ "cluster": c, "experiments": rows, "warnings": warnings })
                })
                .collect();
            return print_json(&v);
        }
        for (cluster, plan, warnings) in plans {
            println!("{cluster}");
            for g in plan {
                let latency = g
                    .injected_latency_ms
                    .map_or(String::new(), |ms| format!(" {ms}ms"));
                println!(
                    "  {:>6}  {}{latency}  criticality {} safety {}",
                    g.priority_score,
                    g.key(),
                    g.criticality,
                    g.safety
                );
            }
            for w in warnings {
                println!("  {:?} {:?}: {}", w.severity, w.code, w.message);
            }
        }
    }

    pub fn schedule_run(&self, run: &ScheduleRun, done: &[Experiment]) {
        if self.json {
            return print_json(
                &json!({ "started": run.started, "skipped": run.skipped, "experiments": done }),
            );
        }
        for e in done {
            println!("{}", summary(e));
        }
        for s in &run.skipped {
            println!("skipped {}: {}", s.key, s.reason);
        }
        if run.started.is_empty() {
            println!("nothing started");
        }
    }
}

/// Exit status for finished experiments: everything must have completed
/// with a passing verdict.
pub fn require_pass(done: &[Experiment]) -> Outcome {
    let bad: Vec<String> = done
        .iter()
        .filter(|e| {
            e.state != ExperimentState::Completed
                || e.verdict.as_ref().map(|v| v.overall) != Some(Overall::Pass)
        })
        .map(|e| {
            let verdict = e
                .verdict
                .as_ref()
                .map_or("no verdict".to_string(), |v| format!("{:?}", v.overall));
            format!("{} ended {} ({verdict})", e.id, e.state)
        })
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_NOT_PASSED, bad.join("; ")))
    }
}
