//! Front-door filter: sticky user sampling and request annotation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{ExperimentId, FaultRule, Group, GroupRole, RequestContext, UserId};
use crate::telemetry::Telemetry;

/// Published when an experiment starts; the filter samples users against
/// every active event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEvent {
    pub experiment_id: ExperimentId,
    /// Percentage of users placed in *each* group.
    pub sampling_pct: f64,
    pub fault: FaultRule,
    pub vip_original: String,
    pub vip_baseline: String,
    pub vip_canary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub user_id: UserId,
    pub experiment_id: ExperimentId,
    pub group: GroupRole,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdgeError {
    #[error("experiment {0} is already published")]
    Duplicate(ExperimentId),
    #[error("sampling percentage {pct} outside (0, {max}]")]
    SamplingOutOfRange { pct: f64, max: f64 },
    #[error("original, baseline and canary vips must be distinct")]
    VipsNotDistinct,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable uniform hash of `(user, experiment)` onto `[0, 1)`.
pub fn sampling_hash(user: UserId, experiment: &ExperimentId) -> f64 {
    let h = fnv1a(
        fnv1a(FNV_OFFSET, &user.0.to_le_bytes()),
        experiment.as_str().as_bytes(),
    );
    (splitmix64(h) >> 11) as f64 / (1u64 << 53) as f64
}

/// `[0, p)` is baseline, `[p, 2p)` canary, the rest untouched.
pub fn assign_group(user: UserId, event: &ExperimentEvent) -> GroupRole {
    let p = event.sampling_pct / 100.0;
    let h = sampling_hash(user, &event.experiment_id);
    if h < p {
        GroupRole::Baseline
    } else if h < 2.0 * p {
        GroupRole::Canary
    } else {
        GroupRole::None
    }
}

/// Receives group-membership events emitted while filtering.
pub trait MembershipSink {
    fn membership(&mut self, group: &Group, user: UserId);
}

impl MembershipSink for Telemetry {
    fn membership(&mut self, group: &Group, user: UserId) {
        self.record_membership(group, user);
    }
}

/// Discards membership events.
pub struct NoSink;

impl MembershipSink for NoSink {
    fn membership(&mut self, _: &Group, _: UserId) {}
}

#[derive(Debug, Clone)]
pub struct EdgeFilter {
    events: Vec<ExperimentEvent>,
    max_sampling_pct: f64,
}

impl Default for EdgeFilter {
    fn default() -> Self {
        Self::new(50.0)
    }
}

impl EdgeFilter {
    pub fn new(max_sampling_pct: f64) -> Self {
        Self {
            events: Vec::new(),
            max_sampling_pct,
        }
    }

    pub fn publish(&mut self, event: ExperimentEvent) -> Result<(), EdgeError> {
        if self
            .events
            .iter()
            .any(|e| e.experiment_id == event.experiment_id)
        {
            return Err(EdgeError::Duplicate(event.experiment_id));
        }
        if !(event.sampling_pct > 0.0 && event.sampling_pct <= self.max_sampling_pct) {
            return Err(EdgeError::SamplingOutOfRange {
                pct: event.sampling_pct,
                max: self.max_sampling_pct,
            });
        }
        if event.vip_original == event.vip_baseline
            || event.vip_original == event.vip_canary
            || event.vip_baseline == event.vip_canary
        {
            return Err(EdgeError::VipsNotDistinct);
        }
        self.events.push(event);
        Ok(())
    }

    pub fn unpublish(&mut self, experiment: &ExperimentId) -> Option<ExperimentEvent> {
        let pos = self
            .events
            .iter()
            .position(|e| &e.experiment_id == experiment)?;
        Some(self.events.remove(pos))
    }

    pub fn is_published(&self, experiment: &ExperimentId) -> bool {
        self.events.iter().any(|e| &e.experiment_id == experiment)
    }

    pub fn active(&self) -> &[ExperimentEvent] {
        &self.events
    }

    /// Share of traffic currently diverted (both groups of every event).
    pub fn impacted_pct(&self) -> f64 {
        self.events.iter().map(|e| 2.0 * e.sampling_pct).sum()
    }

    /// Annotates a request for `user`. The first event (in publication
    /// order) that places the user in a group claims the request.
    pub fn filter_request(&self, user: UserId, sink: &mut dyn MembershipSink) -> RequestContext {
        for event in &self.events {
            let (group, target, rules) = match assign_group(user, event) {
                GroupRole::None => continue,
                GroupRole::Baseline => (
                    Group::Baseline(event.experiment_id.clone()),
                    &event.vip_baseline,
                    Vec::new(),
                ),
                GroupRole::Canary => (
                    Group::Canary(event.experiment_id.clone()),
                    &event.vip_canary,
                    vec![event.fault.clone()],
                ),
            };
            let overrides = BTreeMap::from([(event.vip_original.clone(), target.clone())]);
            let ctx = RequestContext::new(user, group, overrides, rules)
                .expect("published events carry a single valid rule");
            sink.membership(&ctx.group, user);
            return ctx;
        }
        RequestContext::plain(user)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::InjectionPoint;

    fn event(id: &str, pct: f64) -> ExperimentEvent {
        ExperimentEvent {
            experiment_id: ExperimentId::new(id),
            sampling_pct: pct,
            fault: FaultRule::fail(InjectionPoint::rpc_client("bookmarks")),
            vip_original: "api".into(),
            vip_baseline: "api-chap-baseline".into(),
            vip_canary: "api-chap-canary".into(),
        }
    }

    #[test]
    fn half_and_half_covers_everyone() {
        let ev = event("e", 50.0);
        for u in 0..2000 {
            assert_ne!(assign_group(UserId(u), &ev), GroupRole::None);
        }
    }

    #[test]
    fn assignment_is_stable() {
        let ev = event("e", 1.0);
        for u in 0..500 {
            assert_eq!(assign_group(UserId(u), &ev), assign_group(UserId(u), &ev));
        }
    }

    #[test]
    fn canary_annotation() {
        let mut f = EdgeFilter::default();
        f.publish(event("e", 50.0)).unwrap();
        let user = (0..)
            .map(UserId)
            .find(|&u| assign_group(u, &f.active()[0]) == GroupRole::Canary)
            .unwrap();
        let ctx = f.filter_request(user, &mut NoSink);
        assert_eq!(
            ctx.routing_overrides.get("api").map(String::as_str),
            Some("api-chap-canary")
        );
        assert_eq!(
            *ctx.fault_rules,
            vec![FaultRule::fail(InjectionPoint::rpc_client("bookmarks"))]
        );

        let user = (0..)
            .map(UserId)
            .find(|&u| assign_group(u, &f.active()[0]) == GroupRole::Baseline)
            .unwrap();
        let ctx = f.filter_request(user, &mut NoSink);
        assert_eq!(
            ctx.routing_overrides.get("api").map(String::as_str),
            Some("api-chap-baseline")
        );
        assert!(ctx.fault_rules.is_empty());
    }

    #[test]
    fn no_events_leaves_request_untouched() {
        let f = EdgeFilter::default();
        let ctx = f.filter_request(UserId(3), &mut NoSink);
        assert_eq!(ctx.group, Group::None);
        assert!(ctx.routing_overrides.is_empty());
    }

    #[test]
    fn publish_unpublish_and_duplicates() {
        let mut f = EdgeFilter::default();
        f.publish(event("e", 50.0)).unwrap();
        assert_eq!(
            f.publish(event("e", 1.0)),
            Err(EdgeError::Duplicate(ExperimentId::new("e")))
        );
        let user = UserId(11);
        assert_ne!(f.filter_request(user, &mut NoSink).group, Group::None);
        f.unpublish(&ExperimentId::new("e"));
        assert_eq!(f.filter_request(user, &mut NoSink).group, Group::None);
    }

    #[test]
    fn rejects_bad_events() {
        let mut f = EdgeFilter::default();
        assert!(matches!(
            f.publish(event("a", 0.0)),
            Err(EdgeError::SamplingOutOfRange { .. })
        ));
        let mut ev = event("b", 1.0);
        ev.vip_canary = ev.vip_baseline.clone();
        assert_eq!(f.publish(ev), Err(EdgeError::VipsNotDistinct));
    }

    #[test]
    fn first_published_event_wins() {
        let mut f = EdgeFilter::default();
        f.publish(event("first", 50.0)).unwrap();
        let mut second = event("second", 50.0);
        second.vip_original = "other".into();
        second.vip_baseline = "other-b".into();
        second.vip_canary = "other-c".into();
        f.publish(second).unwrap();
        for u in 0..200 {
            let g = f.filter_request(UserId(u), &mut NoSink).group;
            assert_eq!(g.experiment(), Some(&ExperimentId::new("first")));
        }
        assert_eq!(f.impacted_pct(), 200.0);
    }
}
