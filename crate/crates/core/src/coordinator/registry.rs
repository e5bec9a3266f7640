use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Hello, NodeId};
use crate::time::Timestamp;

pub type ConnId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeState {
    Connected,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: NodeId,
    pub beam: u32,
    pub slot: u32,
    pub state: NodeState,
    pub last_heartbeat: Timestamp,
    pub frames_delivered: u64,
    #[serde(skip)]
    pub conn: Option<ConnId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("slot ({beam}, {slot}) is held by {holder}")]
    SlotConflict { beam: u32, slot: u32, holder: NodeId },
    #[error("slot ({beam}, {slot}) is outside the {beams}x{cameras_per_beam} rig")]
    OutOfRig { beam: u32, slot: u32, beams: u32, cameras_per_beam: u32 },
}

#[derive(Debug, Clone)]
pub struct Registry {
    beams: u32,
    cameras_per_beam: u32,
    nodes: BTreeMap<NodeId, NodeRecord>,
}

impl Registry {
    pub fn new(beams: u32, cameras_per_beam: u32) -> Self {
        Self { beams, cameras_per_beam, nodes: BTreeMap::new() }
    }

    /// Registers or re-registers a node. Returns the connection this one
    /// replaces, if any.
    pub fn register(&mut self, hello: &Hello, conn: ConnId, now: Timestamp) -> Result<Option<ConnId>, RegistryError> {
        if hello.beam >= self.beams || hello.slot >= self.cameras_per_beam {
            return Err(RegistryError::OutOfRig {
                beam: hello.beam,
                slot: hello.slot,
                beams: self.beams,
                cameras_per_beam: self.cameras_per_beam,
            });
        }
        if let Some(holder) = self.nodes.values().find(|r| {
            r.state == NodeState::Connected
                && r.beam == hello.beam
                && r.slot == hello.slot
                && r.node_id != hello.node_id
        }) {
            return Err(RegistryError::SlotConflict {
                beam: hello.beam,
                slot: hello.slot,
                holder: holder.node_id.clone(),
            });
        }
        let rec = self.nodes.entry(hello.node_id.clone()).or_insert_with(|| NodeRecord {
            node_id: hello.node_id.clone(),
            beam: hello.beam,
            slot: hello.slot,
            state: NodeState::Lost,
            last_heartbeat: now,
            frames_delivered: 0,
            conn: None,
        });
        let replaced = rec.conn.filter(|c| *c != conn);
        rec.beam = hello.beam;
        rec.slot = hello.slot;
        rec.state = NodeState::Connected;
        rec.last_heartbeat = now;
        rec.conn = Some(conn);
        Ok(replaced)
    }

    pub fn get(&self, id: &NodeId) -> Option<&NodeRecord> {
        self.nodes.get(id)
    }

    pub fn get_mut(&mut self, id: &NodeId) -> Option<&mut NodeRecord> {
        self.nodes.get_mut(id)
    }

    pub fn by_conn(&self, conn: ConnId) -> Option<&NodeRecord> {
        self.nodes.values().find(|r| r.conn == Some(conn))
    }

    /// Marks the node Lost and forgets its connection. Returns the dropped
    /// connection if the node was connected.
    pub fn mark_lost(&mut self, id: &NodeId) -> Option<ConnId> {
        let rec = self.nodes.get_mut(id)?;
        if rec.state == NodeState::Lost {
            return None;
        }
        rec.state = NodeState::Lost;
        rec.conn.take()
    }

    pub fn touch(&mut self, id: &NodeId, now: Timestamp) {
        if let Some(rec) = self.nodes.get_mut(id) {
            rec.last_heartbeat = now;
        }
    }

    pub fn records(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn connected(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values().filter(|r| r.state == NodeState::Connected)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.beams, self.cameras_per_beam)
    }
}
