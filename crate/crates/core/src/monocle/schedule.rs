//! Picks which generated experiments may run, in what order.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::scoring::GeneratedExperiment;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub last_run: Option<DateTime<Utc>>,
    pub running: bool,
    /// Failed and not yet reviewed by anyone.
    pub failed_unreviewed: bool,
}

/// Keyed by [`GeneratedExperiment::key`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct History {
    pub entries: BTreeMap<String, HistoryEntry>,
}

impl History {
    pub fn entry(&mut self, key: &str) -> &mut HistoryEntry {
        self.entries.entry(key.to_string()).or_default()
    }

    pub fn get(&self, key: &str) -> Option<&HistoryEntry> {
        self.entries.get(key)
    }
}

/// Positive scores only, minus anything running, failed and unreviewed, or
/// run within the cooldown; highest score first, then highest criticality,
/// then dependency name.
pub fn schedule(
    plans: &[GeneratedExperiment],
    history: &History,
    cooldown_days: u32,
    now: DateTime<Utc>,
) -> Vec<GeneratedExperiment> {
    let cooldown = Duration::days(i64::from(cooldown_days));
    let mut out: Vec<GeneratedExperiment> = plans
        .iter()
        .filter(|p| p.priority_score > 0)
        .filter(|p| match history.get(&p.key()) {
            None => true,
            Some(h) => {
                !h.running && !h.failed_unreviewed && h.last_run.is_none_or(|t| now - t >= cooldown)
            }
        })
        .cloned()
        .collect();
    out.sort_by(|a, b| {
        b.priority_score
            .cmp(&a.priority_score)
            .then(b.criticality.cmp(&a.criticality))
            .then_with(|| a.dependency.name.cmp(&b.dependency.name))
            .then_with(|| a.dependency.cmp(&b.dependency))
            .then(a.exp_type.cmp(&b.exp_type))
    });
    out
}
