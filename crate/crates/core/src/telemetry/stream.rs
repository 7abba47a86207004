//! Low-latency per-second counters for experiment groups.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::TelemetryError;
use crate::fit::{ExperimentId, GroupRole, UserId};

/// Channel whose counters populate `sps_success`/`sps_error`.
pub const SPS_CHANNEL: &str = "sps";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub success: u64,
    pub error: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.success + self.error
    }

    pub fn add(&mut self, success: bool) {
        if success {
            self.success += 1;
        } else {
            self.error += 1;
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        self.success += other.success;
        self.error += other.error;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSample {
    pub timestamp: u64,
    pub experiment_id: ExperimentId,
    pub group: GroupRole,
    pub sps_success: u64,
    pub sps_error: u64,
    /// Other KPI channels (downloads, login, signup, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub channels: BTreeMap<String, Counts>,
}

impl StreamSample {
    pub fn sps(&self) -> Counts {
        Counts {
            success: self.sps_success,
            error: self.sps_error,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct GroupSecond {
    sps: Counts,
    channels: BTreeMap<String, Counts>,
}

#[derive(Debug, Clone)]
struct StreamJob {
    started_sec: u64,
    stopped_sec: Option<u64>,
    // indexed by second - started_sec; [baseline, canary]
    seconds: Vec<[GroupSecond; 2]>,
    members: [HashSet<UserId>; 2],
    totals: [BTreeMap<String, Counts>; 2],
}

fn slot(role: GroupRole) -> Option<usize> {
    match role {
        GroupRole::Baseline => Some(0),
        GroupRole::Canary => Some(1),
        GroupRole::None => None,
    }
}

/// Per-experiment stream jobs.
#[derive(Debug, Clone, Default)]
pub struct StreamStore {
    jobs: BTreeMap<ExperimentId, StreamJob>,
}

impl StreamStore {
    pub fn start_job(&mut self, exp: &ExperimentId, now_sec: u64) {
        self.jobs.entry(exp.clone()).or_insert_with(|| StreamJob {
            started_sec: now_sec,
            stopped_sec: None,
            seconds: Vec::new(),
            members: Default::default(),
            totals: Default::default(),
        });
    }

    /// Stops counting; samples remain queryable.
    pub fn stop_job(&mut self, exp: &ExperimentId, now_sec: u64) {
        if let Some(job) = self.jobs.get_mut(exp) {
            job.stopped_sec.get_or_insert(now_sec);
        }
    }

    pub fn is_running(&self, exp: &ExperimentId) -> bool {
        self.jobs.get(exp).is_some_and(|j| j.stopped_sec.is_none())
    }

    pub fn record_membership(&mut self, exp: &ExperimentId, role: GroupRole, user: UserId) {
        if let (Some(job), Some(i)) = (self.jobs.get_mut(exp), slot(role)) {
            if job.stopped_sec.is_none() {
                job.members[i].insert(user);
            }
        }
    }

    /// Returns whether the event was counted.
    pub fn record(
        &mut self,
        exp: &ExperimentId,
        role: GroupRole,
        channel: &str,
        success: bool,
        sec: u64,
    ) -> bool {
        let (Some(job), Some(i)) = (self.jobs.get_mut(exp), slot(role)) else {
            return false;
        };
        if job.stopped_sec.is_some() || sec < job.started_sec {
            return false;
        }
        let idx = (sec - job.started_sec) as usize;
        if job.seconds.len() <= idx {
            job.seconds.resize_with(idx + 1, Default::default);
        }
        let cell = &mut job.seconds[idx][i];
        if channel == SPS_CHANNEL {
            cell.sps.add(success);
        } else {
            cell.channels
                .entry(channel.to_string())
                .or_default()
                .add(success);
        }
        job.totals[i]
            .entry(channel.to_string())
            .or_default()
            .add(success);
        true
    }

    /// Samples for the last `window` completed seconds before `now_sec`,
    /// zero-filled, baseline then canary for each second.
    pub fn query(
        &self,
        exp: &ExperimentId,
        window: u64,
        now_sec: u64,
    ) -> Result<Vec<StreamSample>, TelemetryError> {
        let job = self
            .jobs
            .get(exp)
            .ok_or_else(|| TelemetryError::UnknownExperiment(exp.clone()))?;
        let end = job.stopped_sec.map_or(now_sec, |s| s.min(now_sec));
        let start = end.saturating_sub(window).max(job.started_sec);
        let mut out = Vec::with_capacity(2 * (end.saturating_sub(start)) as usize);
        for sec in start..end {
            let cells = job.seconds.get((sec - job.started_sec) as usize);
            for (i, role) in [GroupRole::Baseline, GroupRole::Canary]
                .into_iter()
                .enumerate()
            {
                let cell = cells.map(|c| &c[i]);
                out.push(StreamSample {
                    timestamp: sec,
                    experiment_id: exp.clone(),
                    group: role,
                    sps_success: cell.map_or(0, |c| c.sps.success),
                    sps_error: cell.map_or(0, |c| c.sps.error),
                    channels: cell.map(|c| c.channels.clone()).unwrap_or_default(),
                });
            }
        }
        Ok(out)
    }

    /// Counts per channel since the job started.
    pub fn totals(&self, exp: &ExperimentId, role: GroupRole) -> BTreeMap<String, Counts> {
        match (self.jobs.get(exp), slot(role)) {
            (Some(job), Some(i)) => job.totals[i].clone(),
            _ => BTreeMap::new(),
        }
    }

    pub fn members(&self, exp: &ExperimentId, role: GroupRole) -> usize {
        match (self.jobs.get(exp), slot(role)) {
            (Some(job), Some(i)) => job.members[i].len(),
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp() -> ExperimentId {
        ExperimentId::new("e1")
    }

    #[test]
    fn counts_per_second() {
        let mut s = StreamStore::default();
        s.start_job(&exp(), 10);
        assert!(s.record(&exp(), GroupRole::Canary, SPS_CHANNEL, true, 10));
        assert!(s.record(&exp(), GroupRole::Canary, SPS_CHANNEL, true, 10));
        assert!(!s.record(&exp(), GroupRole::None, SPS_CHANNEL, true, 10));
        let samples = s.query(&exp(), 30, 11).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[1].group, GroupRole::Canary);
        assert_eq!(samples[1].sps_success, 2);
        assert_eq!(samples[0].sps_success, 0);
    }

    #[test]
    fn window_bounds_and_zero_fill() {
        let mut s = StreamStore::default();
        s.start_job(&exp(), 0);
        let samples = s.query(&exp(), 30, 100).unwrap();
        assert_eq!(samples.len(), 60);
        assert!(samples
            .iter()
            .all(|x| x.sps_success == 0 && x.sps_error == 0));
        assert_eq!(samples.first().unwrap().timestamp, 70);
        assert_eq!(samples.last().unwrap().timestamp, 99);
    }

    #[test]
    fn stopped_job_keeps_data_and_ignores_new_events() {
        let mut s = StreamStore::default();
        s.start_job(&exp(), 0);
        s.record(&exp(), GroupRole::Baseline, SPS_CHANNEL, false, 3);
        s.stop_job(&exp(), 5);
        assert!(!s.record(&exp(), GroupRole::Baseline, SPS_CHANNEL, false, 6));
        let samples = s.query(&exp(), 100, 50).unwrap();
        assert_eq!(samples.len(), 10);
        assert_eq!(s.totals(&exp(), GroupRole::Baseline)[SPS_CHANNEL].error, 1);
    }

    #[test]
    fn unknown_experiment_errors() {
        let s = StreamStore::default();
        assert!(s.query(&exp(), 1, 1).is_err());
    }
}
