//! VO membership kept by the central node: who is in, where they listen,
//! which algorithms they offer, and whether they are still alive.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeState {
    Live,
    Suspect,
    Dead,
}

/// What a node announces when it registers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub node_id: String,
    pub site_id: String,
    pub address: String,
    pub algorithms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub node_id: String,
    pub site_id: String,
    pub address: String,
    pub algorithms: Vec<String>,
    /// Milliseconds since the epoch.
    pub last_heartbeat: u64,
    pub status: NodeState,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoMembership {
    pub nodes: Vec<NodeEntry>,
}

impl VoMembership {
    pub fn get(&self, node_id: &str) -> Option<&NodeEntry> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn live(&self) -> impl Iterator<Item = &NodeEntry> {
        self.nodes.iter().filter(|n| n.status == NodeState::Live)
    }

    pub fn by_site(&self, site_id: &str) -> impl Iterator<Item = &NodeEntry> + '_ {
        let site = site_id.to_string();
        self.nodes.iter().filter(move |n| n.site_id == site)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("node id {0} is already registered")]
    DuplicateNodeId(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
}

#[derive(Debug, Clone)]
pub struct Registry {
    nodes: BTreeMap<String, NodeEntry>,
    interval_ms: u64,
}

impl Registry {
    pub fn new(heartbeat_interval_ms: u64) -> Self {
        Self {
            nodes: BTreeMap::new(),
            interval_ms: heartbeat_interval_ms,
        }
    }

    pub fn interval_ms(&self) -> u64 {
        self.interval_ms
    }

    /// Adds a node as live. A node restarting with the same site and address
    /// rejoins; any other reuse of the id is refused.
    pub fn register(&mut self, info: NodeInfo, now: u64) -> Result<&NodeEntry, RegistryError> {
        if let Some(old) = self.nodes.get(&info.node_id) {
            if old.site_id != info.site_id || old.address != info.address {
                return Err(RegistryError::DuplicateNodeId(info.node_id));
            }
        }
        let id = info.node_id.clone();
        self.nodes.insert(
            id.clone(),
            NodeEntry {
                node_id: info.node_id,
                site_id: info.site_id,
                address: info.address,
                algorithms: info.algorithms,
                last_heartbeat: now,
                status: NodeState::Live,
            },
        );
        Ok(&self.nodes[&id])
    }

    pub fn heartbeat(&mut self, node_id: &str, now: u64) -> Result<(), RegistryError> {
        let entry = self
            .nodes
            .get_mut(node_id)
            .ok_or_else(|| RegistryError::UnknownNode(node_id.to_string()))?;
        entry.last_heartbeat = entry.last_heartbeat.max(now);
        entry.status = NodeState::Live;
        Ok(())
    }

    fn state_at(&self, entry: &NodeEntry, now: u64) -> NodeState {
        let silent = now.saturating_sub(entry.last_heartbeat);
        if silent > 3 * self.interval_ms {
            NodeState::Dead
        } else if silent > 2 * self.interval_ms {
            NodeState::Suspect
        } else {
            NodeState::Live
        }
    }

    /// Re-derives every status from heartbeat age; returns the changes.
    pub fn detect_failures(&mut self, now: u64) -> Vec<(String, NodeState, NodeState)> {
        let mut changes = Vec::new();
        let next: Vec<(String, NodeState)> = self
            .nodes
            .values()
            .map(|e| (e.node_id.clone(), self.state_at(e, now)))
            .collect();
        for (id, state) in next {
            let entry = self.nodes.get_mut(&id).expect("present");
            if entry.status != state {
                changes.push((id, entry.status, state));
                entry.status = state;
            }
        }
        changes
    }

    pub fn membership(&mut self, now: u64) -> VoMembership {
        self.detect_failures(now);
        VoMembership {
            nodes: self.nodes.values().cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}
