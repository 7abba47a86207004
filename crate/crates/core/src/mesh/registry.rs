//! Service discovery: instances registered under VIPs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::fit::{ExperimentId, GroupRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInstance {
    pub instance_id: String,
    pub cluster: String,
    pub vip: String,
    pub healthy: bool,
    pub properties: BTreeMap<String, String>,
    pub group: GroupRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentId>,
}

/// Instances are addressed by their index, which never changes once
/// registered.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    instances: Vec<ClusterInstance>,
    healthy_by_vip: HashMap<String, Vec<usize>>,
}

impl Registry {
    pub fn register(&mut self, instance: ClusterInstance) -> usize {
        let idx = self.instances.len();
        if instance.healthy {
            self.healthy_by_vip
                .entry(instance.vip.clone())
                .or_default()
                .push(idx);
        }
        self.instances.push(instance);
        idx
    }

    pub fn deregister(&mut self, idx: usize) {
        let inst = &mut self.instances[idx];
        if !inst.healthy {
            return;
        }
        inst.healthy = false;
        if let Some(list) = self.healthy_by_vip.get_mut(&inst.vip) {
            list.retain(|&i| i != idx);
            if list.is_empty() {
                self.healthy_by_vip.remove(&inst.vip);
            }
        }
    }

    pub fn get(&self, idx: usize) -> &ClusterInstance {
        &self.instances[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut ClusterInstance {
        &mut self.instances[idx]
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClusterInstance> {
        self.instances.iter()
    }

    /// Healthy instances advertising `vip`.
    pub fn healthy(&self, vip: &str) -> &[usize] {
        self.healthy_by_vip
            .get(vip)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Every VIP with at least one healthy instance.
    pub fn live_vips(&self) -> impl Iterator<Item = &str> {
        self.healthy_by_vip.keys().map(String::as_str)
    }
}

/// Healthy instances for `vip` after applying routing overrides.
pub fn resolve_vip<'a>(
    vip: &str,
    overrides: &BTreeMap<String, String>,
    registry: &'a Registry,
) -> &'a [usize] {
    let target = overrides.get(vip).map(String::as_str).unwrap_or(vip);
    registry.healthy(target)
}
