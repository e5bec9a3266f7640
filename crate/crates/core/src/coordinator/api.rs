//! Operator API request/response bodies and the event-stream records.
//!
//! These are the JSON shapes served over HTTP and printed by `--json`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::registry::{NodeRecord, NodeState};
use super::session::{FrameSlot, FrameStatus, SessionState};
use crate::fleet::{FleetReport, FleetRow};
use crate::lighting::{LightLevel, PatternKind, PatternSpec, DEFAULT_PATTERN_HEIGHT, DEFAULT_PATTERN_WIDTH};
use crate::protocol::{AckStep, ErrorCode, NodeId, Phase, SessionId};
use crate::time::Timestamp;

/// `(method, path)` of every operator endpoint.
pub const ENDPOINTS: &[(&str, &str)] = &[
    ("GET", "/nodes"),
    ("POST", "/sessions"),
    ("GET", "/sessions/{id}"),
    ("POST", "/lights"),
    ("POST", "/pattern"),
    ("POST", "/fleet"),
    ("GET", "/fleet/{id}"),
    ("GET", "/events"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodesResponse {
    pub beams: u32,
    pub cameras_per_beam: u32,
    pub nodes: Vec<NodeRecord>,
}

impl NodesResponse {
    pub fn connected(&self) -> usize {
        self.nodes.iter().filter(|n| n.state == NodeState::Connected).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSession {
    #[serde(default = "default_session_pattern")]
    pub pattern: PatternSpec,
    #[serde(default = "default_light")]
    pub light: LightLevel,
}

fn default_session_pattern() -> PatternSpec {
    PatternSpec::random_dot(0, 0.5, DEFAULT_PATTERN_WIDTH, DEFAULT_PATTERN_HEIGHT)
}

fn default_light() -> LightLevel {
    LightLevel::Full
}

impl Default for StartSession {
    fn default() -> Self {
        Self { pattern: default_session_pattern(), light: default_light() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameOutcome {
    pub node_id: NodeId,
    pub phase: Phase,
    pub status: FrameStatus,
}

/// Outcome of a finished session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: SessionId,
    pub state: SessionState,
    pub frames_expected: usize,
    pub frames_received: usize,
    pub total_bytes: u64,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
    pub duration_secs: f64,
    /// From the texture capture fan-out to the last stored frame.
    pub transfer_secs: Option<f64>,
    pub missing: Vec<FrameSlot>,
    pub outcomes: Vec<FrameOutcome>,
    pub warnings: Vec<String>,
    pub manifest_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: SessionId,
    pub state: SessionState,
    pub light_level: LightLevel,
    pub pattern: PatternSpec,
    pub expected_nodes: usize,
    pub frames_expected: usize,
    pub frames_received: usize,
    pub started_at: Timestamp,
    pub report: Option<SessionReport>,
}

impl SessionView {
    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightsRequest {
    pub level: LightLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightsResponse {
    pub level: LightLevel,
    pub targets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternRequest {
    pub pattern: PatternSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternResponse {
    pub pattern: PatternSpec,
    pub targets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiErrorKind {
    BadRequest,
    NotFound,
    /// Rejected because of current state, e.g. a session is running.
    Conflict,
    EmptySelection,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind:?}: {message}")]
pub struct ApiError {
    pub kind: ApiErrorKind,
    pub message: String,
}

impl ApiError {
    pub fn new(kind: ApiErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn http_status(&self) -> u16 {
        match self.kind {
            ApiErrorKind::BadRequest | ApiErrorKind::EmptySelection => 400,
            ApiErrorKind::NotFound => 404,
            ApiErrorKind::Conflict => 409,
            ApiErrorKind::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionProgress {
    pub session_id: SessionId,
    pub state: SessionState,
    pub frames_received: usize,
    pub frames_expected: usize,
}

/// One line of the `/events` stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordEvent {
    pub at: Timestamp,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum EventKind {
    NodeConnected {
        node_id: NodeId,
        beam: u32,
        slot: u32,
    },
    NodeLost {
        node_id: NodeId,
    },
    NodeRejected {
        node_id: NodeId,
        code: ErrorCode,
        message: String,
    },
    SessionStarted {
        session_id: SessionId,
        expected_nodes: usize,
        light_level: LightLevel,
        pattern_seed: u64,
    },
    SessionProgress(SessionProgress),
    CommandSent {
        session_id: SessionId,
        node_id: NodeId,
        step: AckStep,
    },
    AckReceived {
        session_id: SessionId,
        node_id: NodeId,
        step: AckStep,
        ok: bool,
    },
    FrameStored {
        session_id: SessionId,
        node_id: NodeId,
        phase: Phase,
        bytes: u64,
        duplicate: bool,
    },
    FrameRejected {
        node_id: NodeId,
        code: ErrorCode,
        message: String,
    },
    SessionFinished {
        session_id: SessionId,
        state: SessionState,
        frames_received: usize,
        missing: usize,
    },
    LightsSet {
        level: LightLevel,
        targets: usize,
    },
    PatternSet {
        kind: PatternKind,
        seed: u64,
        targets: usize,
    },
    FleetStarted {
        job_id: u64,
        targets: usize,
        limit: usize,
    },
    FleetDispatched {
        job_id: u64,
        node_id: NodeId,
        running: usize,
    },
    FleetRow {
        job_id: u64,
        #[serde(flatten)]
        row: FleetRow,
    },
    FleetFinished {
        job_id: u64,
        rows: usize,
        failures: usize,
    },
}

/// Fleet job as returned by `POST /fleet` and `GET /fleet/{id}`.
pub type FleetView = FleetReport;
