//! Canary judgment: per-metric rank-sum comparisons rolled up to a verdict.

pub mod mann_whitney;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{ExperimentId, Group, GroupRole};
use crate::mesh::SimTime;
use crate::telemetry::aggregate::{AggregateStore, SeriesKey};
use crate::telemetry::{
    Telemetry, HEALTH_CPU, HEALTH_ERRORS, HEALTH_LATENCY, HEALTH_REQUESTS, KPI_ERROR, KPI_SUCCESS,
    SPS_CHANNEL, THREAD_POOL_REJECTED,
};
pub use mann_whitney::{mann_whitney, Classification, MannWhitney, Shift};

pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("both samples must be non-empty")]
    EmptySample,
    #[error("samples contain NaN")]
    NotANumber,
    #[error("alpha {0} outside (0, 1)")]
    Alpha(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionOfHarm {
    HighIsBad,
    LowIsBad,
    Either,
}

impl DirectionOfHarm {
    pub fn is_harmful(self, c: Classification) -> bool {
        matches!(
            (self, c),
            (DirectionOfHarm::HighIsBad, Classification::High)
                | (DirectionOfHarm::LowIsBad, Classification::Low)
                | (
                    DirectionOfHarm::Either,
                    Classification::High | Classification::Low
                )
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricClass {
    Kpi,
    Health,
}

/// One metric to compare. `None` samples mean the series was missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricInput {
    pub name: String,
    pub class: MetricClass,
    pub direction_of_harm: DirectionOfHarm,
    pub baseline: Option<Vec<f64>>,
    pub canary: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric_name: String,
    pub class: MetricClass,
    pub classification: Classification,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub direction_of_harm: DirectionOfHarm,
    pub shift: Shift,
    pub n_baseline: usize,
    pub n_canary: usize,
}

impl MetricComparison {
    pub fn harmful(&self) -> bool {
        self.direction_of_harm.is_harmful(self.classification)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overall {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryVerdict {
    pub overall: Overall,
    /// Percentage of comparisons classified Pass.
    pub score: f64,
    pub comparisons: Vec<MetricComparison>,
    /// Health metrics that moved in their harmful direction.
    pub warnings: Vec<String>,
    /// Set when the comparison covers only part of the planned run.
    #[serde(default)]
    pub partial: bool,
}

impl CanaryVerdict {
    pub fn comparison(&self, metric: &str) -> Option<&MetricComparison> {
        self.comparisons.iter().find(|c| c.metric_name == metric)
    }
}

pub fn compare(input: &MetricInput, alpha: f64) -> MetricComparison {
    let missing = MetricComparison {
        metric_name: input.name.clone(),
        class: input.class,
        classification: Classification::Inconclusive,
        statistic: None,
        p_value: None,
        direction_of_harm: input.direction_of_harm,
        shift: Shift::None,
        n_baseline: input.baseline.as_ref().map_or(0, Vec::len),
        n_canary: input.canary.as_ref().map_or(0, Vec::len),
    };
    let (Some(b), Some(c)) = (&input.baseline, &input.canary) else {
        return missing;
    };
    match mann_whitney(b, c, alpha) {
        Ok(r) => MetricComparison {
            classification: r.classification,
            statistic: Some(r.u),
            p_value: Some(r.p_value),
            shift: r.shift,
            ..missing
        },
        Err(_) => missing,
    }
}

/// KPI metrics decide the verdict: any harmful KPI shift fails it, any KPI
/// without a usable comparison makes it inconclusive. Health metrics only
/// contribute warnings and the score.
pub fn judge(metrics: &[MetricInput], alpha: f64) -> CanaryVerdict {
    let comparisons: Vec<MetricComparison> = metrics.iter().map(|m| compare(m, alpha)).collect();
    let kpis: Vec<&MetricComparison> = comparisons
        .iter()
        .filter(|c| c.class == MetricClass::Kpi)
        .collect();
    let overall = if kpis.iter().any(|c| c.harmful()) {
        Overall::Fail
    } else if kpis.is_empty()
        || kpis
            .iter()
            .any(|c| c.classification == Classification::Inconclusive)
    {
        Overall::Inconclusive
    } else {
        Overall::Pass
    };
    let passed = comparisons
        .iter()
        .filter(|c| c.classification == Classification::Pass)
        .count();
    let score = if comparisons.is_empty() {
        0.0
    } else {
        100.0 * passed as f64 / comparisons.len() as f64
    };
    let warnings = comparisons
        .iter()
        .filter(|c| c.class == MetricClass::Health && c.harmful())
        .map(|c| c.metric_name.clone())
        .collect();
    CanaryVerdict {
        overall,
        score,
        comparisons,
        warnings,
        partial: false,
    }
}

/// Where to read an experiment's series from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSeries<'a> {
    pub experiment: &'a ExperimentId,
    pub baseline_cluster: &'a str,
    pub canary_cluster: &'a str,
    pub commands: &'a [String],
    pub from_sec: u64,
    pub to_sec: u64,
}

fn ratio(num: &[f64], den: &[f64]) -> Vec<f64> {
    num.iter()
        .zip(den)
        .filter(|(_, &d)| d > 0.0)
        .map(|(&n, &d)| n / d)
        .collect()
}

fn non_empty(v: Vec<f64>) -> Option<Vec<f64>> {
    (!v.is_empty()).then_some(v)
}

/// Gathers the standard metric set through delayed aggregate queries issued
/// at `now`; points still hidden by the availability delay are left out.
pub fn collect_metrics(
    store: &AggregateStore,
    s: &ExperimentSeries<'_>,
    now: SimTime,
) -> Vec<MetricInput> {
    let q = |key: SeriesKey| {
        store
            .query(&key, s.from_sec, s.to_sec, now)
            .map(|a| a.values())
    };
    let groups = [
        Group::Baseline(s.experiment.clone()),
        Group::Canary(s.experiment.clone()),
    ];
    let kpi = |g: &Group| -> Option<(Vec<f64>, Vec<f64>)> {
        let ok = q(Telemetry::kpi_key(KPI_SUCCESS, SPS_CHANNEL, g))?;
        let err = q(Telemetry::kpi_key(KPI_ERROR, SPS_CHANNEL, g))?;
        let total: Vec<f64> = ok.iter().zip(&err).map(|(a, b)| a + b).collect();
        Some((ratio(&ok, &total), ratio(&err, &total)))
    };
    let [kb, kc] = groups.each_ref().map(kpi);
    let mut out = vec![
        MetricInput {
            name: "sps_success_rate".into(),
            class: MetricClass::Kpi,
            direction_of_harm: DirectionOfHarm::LowIsBad,
            baseline: kb.as_ref().and_then(|k| non_empty(k.0.clone())),
            canary: kc.as_ref().and_then(|k| non_empty(k.0.clone())),
        },
        MetricInput {
            name: "sps_error_rate".into(),
            class: MetricClass::Kpi,
            direction_of_harm: DirectionOfHarm::HighIsBad,
            baseline: kb.as_ref().and_then(|k| non_empty(k.1.clone())),
            canary: kc.as_ref().and_then(|k| non_empty(k.1.clone())),
        },
    ];
    let clusters = [
        (s.baseline_cluster, GroupRole::Baseline),
        (s.canary_cluster, GroupRole::Canary),
    ];
    let health = |metric: &str| clusters.map(|(c, r)| q(Telemetry::health_key(metric, c, r)));
    let [rb, rc] = health(HEALTH_REQUESTS);
    let [eb, ec] = health(HEALTH_ERRORS);
    let [lb, lc] = health(HEALTH_LATENCY);
    let [cb, cc] = health(HEALTH_CPU);
    let err_rate = |e: &Option<Vec<f64>>, r: &Option<Vec<f64>>| match (e, r) {
        (Some(e), Some(r)) => non_empty(ratio(e, r)),
        _ => None,
    };
    let health_input = |name: &str, dir, baseline, canary| MetricInput {
        name: name.to_string(),
        class: MetricClass::Health,
        direction_of_harm: dir,
        baseline,
        canary,
    };
    out.push(health_input(
        "request_rate",
        DirectionOfHarm::Either,
        rb.clone(),
        rc.clone(),
    ));
    out.push(health_input(
        "latency",
        DirectionOfHarm::HighIsBad,
        lb.and_then(non_empty),
        lc.and_then(non_empty),
    ));
    out.push(health_input(
        "error_rate",
        DirectionOfHarm::HighIsBad,
        err_rate(&eb, &rb),
        err_rate(&ec, &rc),
    ));
    out.push(health_input(
        "cpu_utilization",
        DirectionOfHarm::HighIsBad,
        cb.and_then(non_empty),
        cc.and_then(non_empty),
    ));
    for cmd in s.commands {
        let [b, c] =
            clusters.map(|(cl, r)| q(Telemetry::command_key(THREAD_POOL_REJECTED, cl, r, cmd)));
        out.push(health_input(
            &format!("{THREAD_POOL_REJECTED}.{cmd}"),
            DirectionOfHarm::HighIsBad,
            b,
            c,
        ));
    }
    out
}
