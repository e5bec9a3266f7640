//! Fleet maintenance jobs: one command fanned out to many nodes with a cap
//! on simultaneous executions.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::registry::{NodeRecord, NodeState};
use crate::protocol::{FleetOutcome, NodeId};
use crate::time::{duration_ms, Timestamp};

pub const DEFAULT_CONCURRENCY: usize = 16;
pub const DEFAULT_NODE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "select", rename_all = "snake_case")]
pub enum NodeSelector {
    All,
    /// Beams `from..=to`.
    Beams {
        from: u32,
        to: u32,
    },
    Nodes {
        ids: Vec<NodeId>,
    },
}

impl std::str::FromStr for NodeSelector {
    type Err = String;

    /// `all`, `beams:3-5`, `beam:4`, or a comma-separated node list.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "all" {
            return Ok(NodeSelector::All);
        }
        let range = s.strip_prefix("beams:").or_else(|| s.strip_prefix("beam:"));
        if let Some(r) = range {
            let (a, b) = r.split_once('-').unwrap_or((r, r));
            let from = a.trim().parse().map_err(|_| format!("bad beam number {a:?}"))?;
            let to = b.trim().parse().map_err(|_| format!("bad beam number {b:?}"))?;
            if from > to {
                return Err(format!("empty beam range {from}-{to}"));
            }
            return Ok(NodeSelector::Beams { from, to });
        }
        let ids: Vec<NodeId> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(NodeId::new).collect();
        if ids.is_empty() {
            return Err("empty node list".into());
        }
        Ok(NodeSelector::Nodes { ids })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetJob {
    pub targets: NodeSelector,
    pub command: String,
    #[serde(default = "default_limit")]
    pub concurrency_limit: usize,
    #[serde(with = "duration_ms", default = "default_timeout")]
    pub per_node_timeout: Duration,
}

fn default_limit() -> usize {
    DEFAULT_CONCURRENCY
}

fn default_timeout() -> Duration {
    DEFAULT_NODE_TIMEOUT
}

impl FleetJob {
    pub fn new(targets: NodeSelector, command: impl Into<String>) -> Self {
        Self {
            targets,
            command: command.into(),
            concurrency_limit: DEFAULT_CONCURRENCY,
            per_node_timeout: DEFAULT_NODE_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FleetError {
    #[error("selector matched no nodes")]
    EmptySelection,
    #[error("concurrency limit must be at least 1")]
    InvalidLimit,
    #[error("command is empty")]
    EmptyCommand,
}

/// Resolves a selector against the registry. Explicitly named nodes are kept
/// even when unknown so that they get an `Unreachable` row.
pub fn resolve_targets<'a>(
    selector: &NodeSelector,
    records: impl Iterator<Item = &'a NodeRecord>,
) -> Result<Vec<NodeId>, FleetError> {
    let picked: BTreeSet<NodeId> = match selector {
        NodeSelector::All => records.map(|r| r.node_id.clone()).collect(),
        NodeSelector::Beams { from, to } => {
            records.filter(|r| (*from..=*to).contains(&r.beam)).map(|r| r.node_id.clone()).collect()
        }
        NodeSelector::Nodes { ids } => ids.iter().cloned().collect(),
    };
    if picked.is_empty() {
        return Err(FleetError::EmptySelection);
    }
    Ok(picked.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum FleetRowOutcome {
    Exited { code: i32, output: String, duration_ms: u64 },
    Timeout,
    Unreachable,
}

impl FleetRowOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, FleetRowOutcome::Exited { code: 0, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetRow {
    pub node_id: NodeId,
    #[serde(flatten)]
    pub outcome: FleetRowOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetReport {
    pub job_id: u64,
    pub command: String,
    pub concurrency_limit: usize,
    pub peak_concurrency: usize,
    pub done: bool,
    pub started_at: Timestamp,
    pub finished_at: Option<Timestamp>,
    /// One row per selected node, ordered by node id.
    pub rows: Vec<FleetRow>,
}

impl FleetReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.outcome.is_success()).count()
    }
}

/// What the scheduler asks its host to do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FleetAction {
    Dispatch { node_id: NodeId },
    Row(FleetRow),
}

/// Bounded-concurrency scheduler for one job. Pure: the host supplies the
/// time and whether each node is reachable.
#[derive(Debug, Clone)]
pub struct FleetRun {
    pub job_id: u64,
    pub job: FleetJob,
    pending: VecDeque<NodeId>,
    running: BTreeMap<NodeId, Timestamp>,
    rows: BTreeMap<NodeId, FleetRow>,
    selected: usize,
    peak: usize,
    started_at: Timestamp,
    finished_at: Option<Timestamp>,
}

impl FleetRun {
    pub fn new(job_id: u64, job: FleetJob, targets: Vec<NodeId>, now: Timestamp) -> Result<Self, FleetError> {
        if job.concurrency_limit == 0 {
            return Err(FleetError::InvalidLimit);
        }
        if job.command.trim().is_empty() {
            return Err(FleetError::EmptyCommand);
        }
        if targets.is_empty() {
            return Err(FleetError::EmptySelection);
        }
        Ok(Self {
            job_id,
            selected: targets.len(),
            pending: targets.into(),
            job,
            running: BTreeMap::new(),
            rows: BTreeMap::new(),
            peak: 0,
            started_at: now,
            finished_at: None,
        })
    }

    /// Starts as many pending targets as the limit allows.
    pub fn pump(&mut self, now: Timestamp, reachable: impl Fn(&NodeId) -> bool) -> Vec<FleetAction> {
        let mut out = Vec::new();
        while self.running.len() < self.job.concurrency_limit {
            let Some(node) = self.pending.pop_front() else { break };
            if !reachable(&node) {
                out.push(self.finish(now, node, FleetRowOutcome::Unreachable));
                continue;
            }
            self.running.insert(node.clone(), now + self.job.per_node_timeout);
            self.peak = self.peak.max(self.running.len());
            out.push(FleetAction::Dispatch { node_id: node });
        }
        self.check_done(now);
        out
    }

    fn finish(&mut self, _now: Timestamp, node: NodeId, outcome: FleetRowOutcome) -> FleetAction {
        let row = FleetRow { node_id: node.clone(), outcome };
        self.rows.insert(node, row.clone());
        FleetAction::Row(row)
    }

    fn check_done(&mut self, now: Timestamp) {
        if self.finished_at.is_none() && self.rows.len() == self.selected {
            self.finished_at = Some(now);
        }
    }

    pub fn on_result(
        &mut self,
        now: Timestamp,
        node: &NodeId,
        outcome: &FleetOutcome,
        duration_ms: u64,
    ) -> Option<FleetAction> {
        self.running.remove(node)?;
        let outcome = match outcome {
            FleetOutcome::Exited { code, output } => {
                FleetRowOutcome::Exited { code: *code, output: output.clone(), duration_ms }
            }
            FleetOutcome::TimedOut => FleetRowOutcome::Timeout,
        };
        let action = self.finish(now, node.clone(), outcome);
        self.check_done(now);
        Some(action)
    }

    /// A running node went away before answering.
    pub fn on_node_lost(&mut self, now: Timestamp, node: &NodeId) -> Option<FleetAction> {
        self.running.remove(node)?;
        let action = self.finish(now, node.clone(), FleetRowOutcome::Unreachable);
        self.check_done(now);
        Some(action)
    }

    pub fn handle_timeout(&mut self, now: Timestamp) -> Vec<FleetAction> {
        let expired: Vec<NodeId> = self.running.iter().filter(|(_, d)| **d <= now).map(|(n, _)| n.clone()).collect();
        let mut out = Vec::new();
        for node in expired {
            self.running.remove(&node);
            out.push(self.finish(now, node, FleetRowOutcome::Timeout));
        }
        self.check_done(now);
        out
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.running.values().min().copied()
    }

    pub fn selected(&self) -> usize {
        self.selected
    }

    pub fn running(&self) -> usize {
        self.running.len()
    }

    pub fn is_done(&self) -> bool {
        self.finished_at.is_some()
    }

    pub fn report(&self) -> FleetReport {
        FleetReport {
            job_id: self.job_id,
            command: self.job.command.clone(),
            concurrency_limit: self.job.concurrency_limit,
            peak_concurrency: self.peak,
            done: self.is_done(),
            started_at: self.started_at,
            finished_at: self.finished_at,
            rows: self.rows.values().cloned().collect(),
        }
    }
}

/// True for nodes the scheduler may dispatch to.
pub fn is_reachable(record: Option<&NodeRecord>) -> bool {
    record.is_some_and(|r| r.state == NodeState::Connected)
}
