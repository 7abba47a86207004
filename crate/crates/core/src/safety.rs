//! Blast-radius guardrails.

use std::collections::BTreeMap;
use std::sync::Mutex;

use chrono::{DateTime, Datelike, FixedOffset, NaiveTime, Utc, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::ExperimentId;
use crate::fit::GroupRole;
use crate::telemetry::StreamSample;

pub trait WallClock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl WallClock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
pub struct FixedClock(Mutex<DateTime<Utc>>);

impl FixedClock {
    pub fn new(at: DateTime<Utc>) -> Self {
        Self(Mutex::new(at))
    }

    pub fn set(&self, at: DateTime<Utc>) {
        *self.0.lock().expect("clock poisoned") = at;
    }
}

impl WallClock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock poisoned")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BusinessHours {
    pub enabled: bool,
    pub days: Vec<Weekday>,
    pub start: NaiveTime,
    pub end: NaiveTime,
    /// Fixed offset from UTC of the region's local time, in minutes.
    pub utc_offset_minutes: i32,
}

impl Default for BusinessHours {
    fn default() -> Self {
        Self {
            enabled: true,
            days: vec![
                Weekday::Mon,
                Weekday::Tue,
                Weekday::Wed,
                Weekday::Thu,
                Weekday::Fri,
            ],
            start: NaiveTime::from_hms_opt(9, 0, 0).expect("valid time"),
            end: NaiveTime::from_hms_opt(17, 0, 0).expect("valid time"),
            utc_offset_minutes: 0,
        }
    }
}

impl BusinessHours {
    /// `[start, end)` on a listed day, in local time.
    pub fn contains(&self, at: DateTime<Utc>) -> bool {
        let offset = FixedOffset::east_opt(self.utc_offset_minutes * 60)
            .unwrap_or(FixedOffset::east_opt(0).unwrap());
        let local = at.with_timezone(&offset);
        self.days.contains(&local.weekday())
            && local.time() >= self.start
            && local.time() < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoStopConfig {
    pub window_secs: u64,
    pub sps_drop_threshold_pct: f64,
    pub error_rate_multiplier_threshold: f64,
    pub min_events: u64,
}

impl Default for AutoStopConfig {
    fn default() -> Self {
        Self {
            window_secs: 30,
            sps_drop_threshold_pct: 20.0,
            error_rate_multiplier_threshold: 10.0,
            min_events: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyConfig {
    pub business_hours: BusinessHours,
    pub max_total_traffic_pct: f64,
    pub auto_stop: AutoStopConfig,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            business_hours: BusinessHours::default(),
            max_total_traffic_pct: 5.0,
            auto_stop: AutoStopConfig::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid safety config: {0}")]
pub struct SafetyConfigError(pub String);

impl SafetyConfig {
    pub fn validate(&self) -> Result<(), SafetyConfigError> {
        let a = &self.auto_stop;
        if !(self.max_total_traffic_pct > 0.0) {
            return Err(SafetyConfigError(
                "max_total_traffic_pct must be positive".into(),
            ));
        }
        if a.window_secs < 5 {
            return Err(SafetyConfigError(
                "auto_stop.window_secs must be at least 5".into(),
            ));
        }
        if !(a.sps_drop_threshold_pct > 0.0 && a.sps_drop_threshold_pct <= 100.0) {
            return Err(SafetyConfigError(
                "auto_stop.sps_drop_threshold_pct must be in (0, 100]".into(),
            ));
        }
        if !(a.error_rate_multiplier_threshold > 0.0) || a.min_events == 0 {
            return Err(SafetyConfigError(
                "auto_stop thresholds must be positive".into(),
            ));
        }
        if self.business_hours.start >= self.business_hours.end {
            return Err(SafetyConfigError(
                "business_hours.start must precede end".into(),
            ));
        }
        Ok(())
    }
}

/// Machine-readable rejection codes.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    #[error("outside business hours")]
    BusinessHours,
    #[error("a failover is in progress in the region")]
    Failover,
    #[error("the region's traffic budget would be exceeded")]
    TrafficBudget,
    #[error("unknown region")]
    UnknownRegion,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::BusinessHours => "business_hours",
            RejectReason::Failover => "failover",
            RejectReason::TrafficBudget => "traffic_budget",
            RejectReason::UnknownRegion => "unknown_region",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionState {
    pub region: String,
    pub failover_in_progress: bool,
    /// Sum over admitted experiments of twice their sampling percentage.
    pub active_impact_pct: f64,
    #[serde(default)]
    pub admitted: BTreeMap<ExperimentId, f64>,
}

const EPS: f64 = 1e-9;

pub fn preflight(
    sampling_pct: f64,
    region: &RegionState,
    wall_clock: DateTime<Utc>,
    config: &SafetyConfig,
) -> Result<(), RejectReason> {
    if config.business_hours.enabled && !config.business_hours.contains(wall_clock) {
        return Err(RejectReason::BusinessHours);
    }
    if region.failover_in_progress {
        return Err(RejectReason::Failover);
    }
    if region.active_impact_pct + 2.0 * sampling_pct > config.max_total_traffic_pct + EPS {
        return Err(RejectReason::TrafficBudget);
    }
    Ok(())
}

/// Admission bookkeeping across regions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Regions {
    pub regions: BTreeMap<String, RegionState>,
}

impl Regions {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        let regions = names
            .into_iter()
            .map(|n| {
                let n = n.into();
                (
                    n.clone(),
                    RegionState {
                        region: n,
                        ..RegionState::default()
                    },
                )
            })
            .collect();
        Self { regions }
    }

    pub fn get(&self, region: &str) -> Option<&RegionState> {
        self.regions.get(region)
    }

    pub fn set_failover(&mut self, region: &str, in_progress: bool) -> Result<(), RejectReason> {
        self.regions
            .get_mut(region)
            .ok_or(RejectReason::UnknownRegion)?
            .failover_in_progress = in_progress;
        Ok(())
    }

    /// Runs the preflight checks and, when they pass, reserves the budget.
    pub fn admit(
        &mut self,
        region: &str,
        experiment: &ExperimentId,
        sampling_pct: f64,
        wall_clock: DateTime<Utc>,
        config: &SafetyConfig,
    ) -> Result<(), RejectReason> {
        let state = self
            .regions
            .get_mut(region)
            .ok_or(RejectReason::UnknownRegion)?;
        if state.admitted.contains_key(experiment) {
            return Ok(());
        }
        preflight(sampling_pct, state, wall_clock, config)?;
        state.admitted.insert(experiment.clone(), sampling_pct);
        state.active_impact_pct += 2.0 * sampling_pct;
        Ok(())
    }

    pub fn release(&mut self, region: &str, experiment: &ExperimentId) {
        if let Some(state) = self.regions.get_mut(region) {
            if let Some(pct) = state.admitted.remove(experiment) {
                state.active_impact_pct = (state.active_impact_pct - 2.0 * pct).max(0.0);
                if state.admitted.is_empty() {
                    state.active_impact_pct = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    SpsDrop {
        baseline_success_rate: f64,
        canary_success_rate: f64,
    },
    ErrorSpike {
        baseline_errors: u64,
        canary_errors: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ImpactDecision {
    Continue,
    Stop(StopReason),
}

/// Crude early-stop check over a window of stream samples.
pub fn monitor_impact(window: &[StreamSample], config: &AutoStopConfig) -> ImpactDecision {
    let mut totals = [(0u64, 0u64); 2];
    for s in window {
        let i = match s.group {
            GroupRole::Baseline => 0,
            GroupRole::Canary => 1,
            GroupRole::None => continue,
        };
        totals[i].0 += s.sps_success;
        totals[i].1 += s.sps_error;
    }
    let [(bs, be), (cs, ce)] = totals;
    if bs + be + cs + ce < config.min_events || bs + be == 0 || cs + ce == 0 {
        return ImpactDecision::Continue;
    }
    let b_rate = bs as f64 / (bs + be) as f64;
    let c_rate = cs as f64 / (cs + ce) as f64;
    if c_rate < b_rate * (1.0 - config.sps_drop_threshold_pct / 100.0) {
        return ImpactDecision::Stop(StopReason::SpsDrop {
            baseline_success_rate: b_rate,
            canary_success_rate: c_rate,
        });
    }
    if be >= 1 && ce as f64 > be as f64 * config.error_rate_multiplier_threshold {
        return ImpactDecision::Stop(StopReason::ErrorSpike {
            baseline_errors: be,
            canary_errors: ce,
        });
    }
    ImpactDecision::Continue
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at(y: i32, m: u32, d: u32, h: u32, min: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, m, d, h, min, 0).unwrap()
    }

    #[test]
    fn hours_are_half_open() {
        let bh = BusinessHours::default();
        // 2024-06-03 is a Monday
        assert!(bh.contains(at(2024, 6, 3, 9, 0)));
        assert!(bh.contains(at(2024, 6, 3, 16, 59)));
        assert!(!bh.contains(at(2024, 6, 3, 17, 0)));
        assert!(!bh.contains(at(2024, 6, 3, 8, 59)));
        assert!(!bh.contains(at(2024, 6, 8, 10, 0)));
    }

    #[test]
    fn offset_shifts_the_window() {
        let bh = BusinessHours {
            utc_offset_minutes: -8 * 60,
            ..BusinessHours::default()
        };
        // 17:00 UTC Monday is 09:00 in UTC-8
        assert!(bh.contains(at(2024, 6, 3, 17, 0)));
        assert!(!bh.contains(at(2024, 6, 3, 9, 0)));
    }

    #[test]
    fn config_validation() {
        assert!(SafetyConfig::default().validate().is_ok());
        let mut c = SafetyConfig::default();
        c.auto_stop.window_secs = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn release_returns_budget() {
        let mut r = Regions::new(["us-east-1"]);
        let cfg = SafetyConfig::default();
        let now = at(2024, 6, 3, 10, 0);
        let e = |i: u32| ExperimentId::new(format!("e{i}"));
        r.admit("us-east-1", &e(1), 1.0, now, &cfg).unwrap();
        r.admit("us-east-1", &e(2), 1.0, now, &cfg).unwrap();
        assert_eq!(
            r.admit("us-east-1", &e(3), 1.0, now, &cfg),
            Err(RejectReason::TrafficBudget)
        );
        r.release("us-east-1", &e(1));
        r.admit("us-east-1", &e(3), 1.0, now, &cfg).unwrap();
        assert_eq!(
            r.admit("nowhere", &e(4), 1.0, now, &cfg),
            Err(RejectReason::UnknownRegion)
        );
    }
}
