//! Coordinator: node registry, capture sessions, frame collection, fleet
//! jobs and the operator API, as one sans-IO event loop.
//!
//! Drivers call `on_connection_opened` / `on_message` / `on_connection_closed`
//! / `handle_timeout`, the operator methods (`start_session`, `set_lights`,
//! ...), and then drain [`CoordOutput`]s.

pub mod api;
pub mod registry;
pub mod session;
pub mod store;

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::fleet::{is_reachable, resolve_targets, FleetAction, FleetError, FleetJob, FleetReport, FleetRun};
use crate::lighting::{LightLevel, PatternSpec};
use crate::protocol::{
    AckStep, Body, CaptureCommand, ErrorCode, ErrorMessage, FleetCommand, FrameComplete, FrameKey, HelloAck,
    LightCommand, Message, NodeId, PatternCommand, Phase, SessionId,
};
use crate::time::{duration_ms, Timestamp};

pub use api::{
    ApiError, ApiErrorKind, CoordEvent, EventKind, LightsRequest, LightsResponse, NodesResponse, PatternRequest,
    PatternResponse, SessionProgress, SessionReport, SessionView, StartSession, ENDPOINTS,
};
pub use registry::{ConnId, NodeRecord, NodeState, Registry, RegistryError};
pub use session::{
    session_step, CaptureSession, Deadlines, FrameSlot, FrameStatus, IllegalEvent, SessionEffect, SessionEvent,
    SessionState,
};
pub use store::{verify_manifest, CaptureStore, Manifest, StoreError, VerifyReport};

use store::{AssemblyError, FrameAssembler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordinatorConfig {
    pub beams: u32,
    pub cameras_per_beam: u32,
    #[serde(with = "duration_ms")]
    pub heartbeat_period: Duration,
    /// Silence after which a node is marked Lost.
    #[serde(with = "duration_ms")]
    pub lost_after: Duration,
    pub deadlines: Deadlines,
    #[serde(with = "duration_ms")]
    pub exposure_deadline: Duration,
    /// Give each beam's projector its own seed (`seed + beam`).
    pub per_projector_seeds: bool,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            beams: 24,
            cameras_per_beam: 4,
            heartbeat_period: Duration::from_secs(1),
            lost_after: Duration::from_secs(3),
            deadlines: Deadlines::default(),
            exposure_deadline: Duration::from_secs(2),
            per_projector_seeds: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoordOutput {
    Send { conn: ConnId, msg: Message },
    Close { conn: ConnId },
    Event(CoordEvent),
}

#[derive(Debug)]
struct ActiveSession {
    session: CaptureSession,
    manifest: Manifest,
    started_at: Timestamp,
    timeout: Option<(Timestamp, SessionState)>,
    texture_sent_at: Option<Timestamp>,
    last_frame_at: Option<Timestamp>,
}

impl ActiveSession {
    fn view(&self) -> SessionView {
        SessionView {
            session_id: self.session.session_id.clone(),
            state: self.session.state,
            light_level: self.session.light_level,
            pattern: self.session.pattern,
            expected_nodes: self.session.expected_nodes.len(),
            frames_expected: self.session.frames_expected(),
            frames_received: self.session.frames_received(),
            started_at: self.started_at,
            report: None,
        }
    }

    fn progress(&self) -> SessionProgress {
        SessionProgress {
            session_id: self.session.session_id.clone(),
            state: self.session.state,
            frames_received: self.session.frames_received(),
            frames_expected: self.session.frames_expected(),
        }
    }
}

/// Builds the report of a terminal session.
pub fn finalize_session(
    s: &CaptureSession,
    manifest: &Manifest,
    started_at: Timestamp,
    finished_at: Timestamp,
    transfer: Option<Duration>,
    manifest_path: String,
) -> SessionReport {
    debug_assert!(s.state.is_terminal());
    SessionReport {
        session_id: s.session_id.clone(),
        state: s.state,
        frames_expected: s.frames_expected(),
        frames_received: s.frames_received(),
        total_bytes: manifest.total_bytes(),
        started_at,
        finished_at,
        duration_secs: finished_at.saturating_since(started_at).as_secs_f64(),
        transfer_secs: transfer.map(|d| d.as_secs_f64()),
        missing: s.missing(),
        outcomes: s
            .frames
            .iter()
            .map(|(slot, status)| api::FrameOutcome {
                node_id: slot.node_id.clone(),
                phase: slot.phase,
                status: *status,
            })
            .collect(),
        warnings: s.warnings.clone(),
        manifest_path,
    }
}

pub struct Coordinator {
    cfg: CoordinatorConfig,
    store: CaptureStore,
    registry: Registry,
    assembler: FrameAssembler,
    active: Option<ActiveSession>,
    finished: BTreeMap<SessionId, (SessionView, Manifest)>,
    fleet: BTreeMap<u64, FleetRun>,
    next_job: u64,
    outbox: VecDeque<CoordOutput>,
}

impl std::fmt::Debug for Coordinator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coordinator")
            .field("nodes", &self.registry.len())
            .field("store", &self.store.root())
            .finish_non_exhaustive()
    }
}

fn api_err(kind: ApiErrorKind, msg: impl Into<String>) -> ApiError {
    ApiError::new(kind, msg)
}

impl Coordinator {
    pub fn new(cfg: CoordinatorConfig, store: CaptureStore) -> Self {
        Self {
            registry: Registry::new(cfg.beams, cfg.cameras_per_beam),
            cfg,
            store,
            assembler: FrameAssembler::default(),
            active: None,
            finished: BTreeMap::new(),
            fleet: BTreeMap::new(),
            next_job: 1,
            outbox: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn store(&self) -> &CaptureStore {
        &self.store
    }

    pub fn poll_output(&mut self) -> Option<CoordOutput> {
        self.outbox.pop_front()
    }

    pub fn poll_timeout(&self) -> Option<Timestamp> {
        let hb = self.registry.connected().map(|r| r.last_heartbeat + self.cfg.lost_after).min();
        let session = self.active.as_ref().and_then(|a| a.timeout.map(|(t, _)| t));
        let fleet = self.fleet.values().filter_map(|r| r.next_deadline()).min();
        [hb, session, fleet].into_iter().flatten().min()
    }

    fn emit(&mut self, at: Timestamp, kind: EventKind) {
        self.outbox.push_back(CoordOutput::Event(CoordEvent { at, kind }));
    }

    fn send(&mut self, conn: ConnId, body: Body) {
        self.outbox.push_back(CoordOutput::Send { conn, msg: Message::new(body) });
    }

    fn send_to(&mut self, node: &NodeId, body: Body) -> bool {
        match self.registry.get(node).filter(|r| r.state == NodeState::Connected).and_then(|r| r.conn) {
            Some(conn) => {
                self.send(conn, body);
                true
            }
            None => false,
        }
    }

    fn send_error(&mut self, conn: ConnId, code: ErrorCode, message: impl Into<String>, frame: Option<FrameKey>) {
        self.send(conn, Body::Error(ErrorMessage { code, message: message.into(), frame }));
    }

    pub fn on_connection_opened(&mut self, _now: Timestamp, _conn: ConnId) {}

    /// The transport noticed the connection is gone.
    pub fn on_connection_closed(&mut self, now: Timestamp, conn: ConnId) {
        if let Some(node) = self.registry.by_conn(conn).map(|r| r.node_id.clone()) {
            self.node_lost(now, &node);
        }
    }

    fn node_lost(&mut self, now: Timestamp, node: &NodeId) {
        let Some(conn) = self.registry.mark_lost(node) else { return };
        self.outbox.push_back(CoordOutput::Close { conn });
        self.assembler.abandon_node(node);
        self.emit(now, EventKind::NodeLost { node_id: node.clone() });
        if self.active.as_ref().is_some_and(|a| a.session.expected_nodes.contains(node)) {
            self.apply(now, SessionEvent::NodeLost(node.clone()));
        }
        let jobs: Vec<u64> = self.fleet.keys().copied().collect();
        for job in jobs {
            let action = self.fleet.get_mut(&job).and_then(|r| r.on_node_lost(now, node));
            if let Some(a) = action {
                self.fleet_actions(now, job, vec![a]);
            }
        }
    }

    pub fn handle_timeout(&mut self, now: Timestamp) {
        let silent: Vec<NodeId> = self
            .registry
            .connected()
            .filter(|r| r.last_heartbeat + self.cfg.lost_after <= now)
            .map(|r| r.node_id.clone())
            .collect();
        for node in silent {
            self.node_lost(now, &node);
        }
        if let Some((at, state)) = self.active.as_ref().and_then(|a| a.timeout) {
            if at <= now {
                if let Some(a) = self.active.as_mut() {
                    a.timeout = None;
                }
                self.apply(now, SessionEvent::Timeout(state));
            }
        }
        let jobs: Vec<u64> = self.fleet.keys().copied().collect();
        for job in jobs {
            let actions = self.fleet.get_mut(&job).map(|r| r.handle_timeout(now)).unwrap_or_default();
            if !actions.is_empty() {
                self.fleet_actions(now, job, actions);
            }
        }
    }

    pub fn on_message(&mut self, now: Timestamp, conn: ConnId, msg: Message) {
        if let Err(reason) = msg.body.validate() {
            self.send_error(conn, ErrorCode::Malformed, reason, None);
            return;
        }
        if let Body::Hello(hello) = &msg.body {
            match self.registry.register(hello, conn, now) {
                Ok(replaced) => {
                    if let Some(old) = replaced {
                        self.outbox.push_back(CoordOutput::Close { conn: old });
                    }
                    self.assembler.abandon_node(&hello.node_id);
                    self.send(
                        conn,
                        Body::HelloAck(HelloAck {
                            node_id: hello.node_id.clone(),
                            heartbeat_period_ms: self.cfg.heartbeat_period.as_millis() as u64,
                        }),
                    );
                    self.emit(
                        now,
                        EventKind::NodeConnected { node_id: hello.node_id.clone(), beam: hello.beam, slot: hello.slot },
                    );
                }
                Err(e) => {
                    let code = match e {
                        RegistryError::SlotConflict { .. } => ErrorCode::SlotConflict,
                        RegistryError::OutOfRig { .. } => ErrorCode::OutOfRig,
                    };
                    self.send_error(conn, code, e.to_string(), None);
                    self.outbox.push_back(CoordOutput::Close { conn });
                    self.emit(
                        now,
                        EventKind::NodeRejected { node_id: hello.node_id.clone(), code, message: e.to_string() },
                    );
                }
            }
            return;
        }
        let Some(node) = self.registry.by_conn(conn).map(|r| r.node_id.clone()) else {
            self.send_error(conn, ErrorCode::NotRegistered, "send Hello first", None);
            return;
        };
        self.registry.touch(&node, now);
        match msg.body {
            Body::Heartbeat(_) => {}
            Body::CaptureAck(ack) => self.on_ack(now, &node, ack),
            Body::FrameHeader(h) => {
                let key = h.frame.key();
                match self.check_frame(&node, &key) {
                    Ok(()) => self.assembler.begin(&h),
                    Err((code, why)) => self.reject_frame(now, conn, &node, key, code, why),
                }
            }
            Body::FrameChunk(c) => match self.assembler.push(&c) {
                Ok(()) | Err(AssemblyError::UnknownFrame) => {}
                Err(e) => self.reject_frame(now, conn, &node, c.key, ErrorCode::ChunkOutOfOrder, e.to_string()),
            },
            Body::FrameComplete(done) => self.on_frame_complete(now, conn, &node, done),
            Body::FleetResult(r) => {
                let action =
                    self.fleet.get_mut(&r.job_id).and_then(|run| run.on_result(now, &node, &r.outcome, r.duration_ms));
                if let Some(a) = action {
                    self.fleet_actions(now, r.job_id, vec![a]);
                }
            }
            Body::Error(e) => {
                self.emit(now, EventKind::FrameRejected { node_id: node, code: e.code, message: e.message });
            }
            other => {
                self.send_error(
                    conn,
                    ErrorCode::Malformed,
                    format!("{} is not accepted by the coordinator", other.kind()),
                    None,
                );
            }
        }
    }

    fn on_ack(&mut self, now: Timestamp, node: &NodeId, ack: crate::protocol::CaptureAck) {
        let Some(active) = self.active.as_ref() else { return };
        if ack.session_id.as_ref() != Some(&active.session.session_id) {
            return;
        }
        let state = active.session.state;
        let ok = ack.is_ok();
        let ev = match ack.step {
            AckStep::Lights => SessionEvent::LightAck { node_id: node.clone(), ok },
            // Acks for the black frame shown during texture capture carry no
            // session step of their own.
            AckStep::Projection if state != SessionState::PatternProject => return,
            AckStep::Projection => SessionEvent::PatternAck { node_id: node.clone(), ok },
            AckStep::Capture(phase) => SessionEvent::CaptureAck { node_id: node.clone(), phase, ok },
        };
        let session_id = active.session.session_id.clone();
        self.emit(now, EventKind::AckReceived { session_id, node_id: node.clone(), step: ack.step, ok });
        self.apply(now, ev);
    }

    /// Where a frame may be accepted, or why not.
    fn check_frame(&self, node: &NodeId, key: &FrameKey) -> Result<(), (ErrorCode, String)> {
        if &key.node_id != node {
            return Err((
                ErrorCode::UnknownNode,
                format!("connection belongs to {node}, frame claims {}", key.node_id),
            ));
        }
        if let Some(a) = self.active.as_ref().filter(|a| a.session.session_id == key.session_id) {
            if !a.session.expected_nodes.contains(node) {
                return Err((ErrorCode::UnknownNode, format!("{node} is not part of {}", key.session_id)));
            }
            if !a.session.phase_commanded(key.phase) {
                return Err((ErrorCode::PhaseMismatch, format!("{} capture was not requested yet", key.phase)));
            }
            if a.session.state.is_terminal() && !a.manifest.contains(node, key.phase) {
                return Err((ErrorCode::SessionClosed, format!("{} is closed", key.session_id)));
            }
            return Ok(());
        }
        match self.finished.get(&key.session_id) {
            Some((_, m)) if m.contains(node, key.phase) => Ok(()),
            Some(_) => Err((ErrorCode::SessionClosed, format!("{} is closed", key.session_id))),
            None => Err((ErrorCode::UnknownSession, format!("no session {}", key.session_id))),
        }
    }

    fn reject_frame(
        &mut self,
        now: Timestamp,
        conn: ConnId,
        node: &NodeId,
        key: FrameKey,
        code: ErrorCode,
        why: String,
    ) {
        self.emit(now, EventKind::FrameRejected { node_id: node.clone(), code, message: why.clone() });
        self.send_error(conn, code, why, Some(key));
    }

    fn on_frame_complete(&mut self, now: Timestamp, conn: ConnId, node: &NodeId, done: FrameComplete) {
        let key = done.key.clone();
        let (meta, bytes) = match self.assembler.finish(&key, &done.checksum) {
            Ok(v) => v,
            Err(AssemblyError::UnknownFrame) => return,
            Err(AssemblyError::ChecksumMismatch) => {
                return self.reject_frame(now, conn, node, key, ErrorCode::ChecksumMismatch, "sha256 mismatch".into())
            }
            Err(e) => return self.reject_frame(now, conn, node, key, ErrorCode::TransferFailed, e.to_string()),
        };
        if let Err((code, why)) = self.check_frame(node, &key) {
            return self.reject_frame(now, conn, node, key, code, why);
        }
        let receipt = Body::FrameComplete(FrameComplete { key: key.clone(), checksum: meta.checksum.clone() });
        let stored = match self.active.as_ref().filter(|a| a.session.session_id == key.session_id) {
            Some(a) => a.manifest.contains(node, key.phase),
            None => true,
        };
        if stored {
            self.send(conn, receipt);
            self.emit(
                now,
                EventKind::FrameStored {
                    session_id: key.session_id,
                    node_id: node.clone(),
                    phase: key.phase,
                    bytes: meta.byte_size,
                    duplicate: true,
                },
            );
            return;
        }
        let row = match self.store.write_frame(&meta, &bytes) {
            Ok(row) => row,
            Err(e) => return self.reject_frame(now, conn, node, key, ErrorCode::TransferFailed, e.to_string()),
        };
        let active = self.active.as_mut().expect("checked above");
        active.manifest.frames.push(row);
        active.last_frame_at = Some(now);
        if let Err(e) = self.store.write_manifest(&active.manifest) {
            self.emit(
                now,
                EventKind::FrameRejected {
                    node_id: node.clone(),
                    code: ErrorCode::TransferFailed,
                    message: e.to_string(),
                },
            );
        }
        if let Some(rec) = self.registry.get_mut(node) {
            rec.frames_delivered += 1;
        }
        self.send(conn, receipt);
        self.emit(
            now,
            EventKind::FrameStored {
                session_id: key.session_id.clone(),
                node_id: node.clone(),
                phase: key.phase,
                bytes: meta.byte_size,
                duplicate: false,
            },
        );
        self.apply(now, SessionEvent::FrameReceived { node_id: node.clone(), phase: key.phase });
    }

    /// Feeds one event to the active session and carries out its effects.
    fn apply(&mut self, now: Timestamp, ev: SessionEvent) {
        let Some(active) = self.active.as_mut() else { return };
        let before = active.session.state;
        let Ok((next, effects)) = session_step(&active.session, ev) else { return };
        let received_before = active.session.frames_received();
        active.session = next;
        let changed = before != active.session.state || received_before != active.session.frames_received();
        let session_id = active.session.session_id.clone();
        for fx in effects {
            match fx {
                SessionEffect::SendLights { nodes, level } => {
                    for n in nodes {
                        let body = Body::LightCommand(LightCommand { session_id: Some(session_id.clone()), level });
                        self.command(now, &session_id, &n, AckStep::Lights, body);
                    }
                }
                SessionEffect::SendPattern { nodes, pattern } => {
                    for n in nodes {
                        let pattern = self.pattern_for(&n, pattern);
                        let body =
                            Body::PatternCommand(PatternCommand { session_id: Some(session_id.clone()), pattern });
                        self.command(now, &session_id, &n, AckStep::Projection, body);
                    }
                }
                SessionEffect::SendCapture { nodes, phase, pattern } => {
                    if phase == Phase::Texture {
                        if let Some(a) = self.active.as_mut() {
                            a.texture_sent_at = Some(now);
                        }
                    }
                    for n in nodes {
                        let body = Body::CaptureCommand(CaptureCommand {
                            session_id: session_id.clone(),
                            phase,
                            pattern_ref: pattern.map(|p| self.pattern_for(&n, p)),
                            exposure_deadline: self.cfg.exposure_deadline.as_millis() as u64,
                        });
                        self.command(now, &session_id, &n, AckStep::Capture(phase), body);
                    }
                }
                SessionEffect::ArmTimeout { state, after } => {
                    if let Some(a) = self.active.as_mut() {
                        a.timeout = Some((now + after, state));
                    }
                }
                SessionEffect::Finished(_) => {}
            }
        }
        if changed {
            let progress = self.active.as_ref().expect("active").progress();
            self.emit(now, EventKind::SessionProgress(progress));
        }
        if self.active.as_ref().is_some_and(|a| a.session.state.is_terminal()) {
            self.finish_session(now);
        }
    }

    fn pattern_for(&self, node: &NodeId, pattern: PatternSpec) -> PatternSpec {
        let beam = self.registry.get(node).map_or(0, |r| r.beam);
        pattern.for_beam(beam, self.cfg.per_projector_seeds)
    }

    fn command(&mut self, now: Timestamp, session_id: &SessionId, node: &NodeId, step: AckStep, body: Body) {
        if self.send_to(node, body) {
            self.emit(now, EventKind::CommandSent { session_id: session_id.clone(), node_id: node.clone(), step });
        }
    }

    fn finish_session(&mut self, now: Timestamp) {
        let Some(a) = self.active.take() else { return };
        if let Err(e) = self.store.write_manifest(&a.manifest) {
            self.emit(
                now,
                EventKind::FrameRejected {
                    node_id: NodeId::new(""),
                    code: ErrorCode::TransferFailed,
                    message: e.to_string(),
                },
            );
        }
        let transfer = match (a.texture_sent_at, a.last_frame_at) {
            (Some(t0), Some(t1)) => Some(t1.saturating_since(t0)),
            _ => None,
        };
        let path = self.store.session_dir(&a.session.session_id).join("manifest.json");
        let report = finalize_session(&a.session, &a.manifest, a.started_at, now, transfer, path.display().to_string());
        self.emit(
            now,
            EventKind::SessionFinished {
                session_id: report.session_id.clone(),
                state: report.state,
                frames_received: report.frames_received,
                missing: report.missing.len(),
            },
        );
        let mut view = a.view();
        view.report = Some(report);
        self.finished.insert(a.session.session_id.clone(), (view, a.manifest));
    }

    fn fleet_actions(&mut self, now: Timestamp, job_id: u64, mut actions: Vec<FleetAction>) {
        loop {
            for a in actions {
                match a {
                    FleetAction::Dispatch { node_id } => {
                        let Some(run) = self.fleet.get(&job_id) else { return };
                        let body = Body::FleetCommand(FleetCommand {
                            job_id,
                            command: run.job.command.clone(),
                            timeout_ms: run.job.per_node_timeout.as_millis() as u64,
                        });
                        let running = run.running();
                        self.send_to(&node_id, body);
                        self.emit(now, EventKind::FleetDispatched { job_id, node_id, running });
                    }
                    FleetAction::Row(row) => self.emit(now, EventKind::FleetRow { job_id, row }),
                }
            }
            let Some(run) = self.fleet.get_mut(&job_id) else { return };
            if run.is_done() {
                let report = run.report();
                let failures = report.failures();
                self.emit(now, EventKind::FleetFinished { job_id, rows: report.rows.len(), failures });
                return;
            }
            let registry = &self.registry;
            actions = run.pump(now, |n| is_reachable(registry.get(n)));
            if actions.is_empty() {
                return;
            }
        }
    }

    // ---- operator API ----

    pub fn nodes(&self) -> NodesResponse {
        NodesResponse {
            beams: self.cfg.beams,
            cameras_per_beam: self.cfg.cameras_per_beam,
            nodes: self.registry.records().cloned().collect(),
        }
    }

    pub fn session_active(&self) -> bool {
        self.active.is_some()
    }

    pub fn start_session(&mut self, now: Timestamp, req: StartSession) -> Result<SessionView, ApiError> {
        req.pattern.validate().map_err(|e| api_err(ApiErrorKind::BadRequest, e.to_string()))?;
        if req.pattern.kind != crate::PatternKind::RandomDot {
            return Err(api_err(ApiErrorKind::BadRequest, "the session pattern must be a random dot pattern"));
        }
        if let Some(a) = &self.active {
            return Err(api_err(ApiErrorKind::Conflict, format!("session {} is still running", a.session.session_id)));
        }
        if self.fleet.values().any(|r| !r.is_done()) {
            return Err(api_err(ApiErrorKind::Conflict, "a fleet job is running"));
        }
        let id = self.next_session_id();
        let expected = self.registry.connected().map(|r| r.node_id.clone()).collect();
        let session = CaptureSession::new(id.clone(), expected, req.pattern, req.light, self.cfg.deadlines);
        let mut manifest = Manifest::new(id.clone(), now, req.light, &req.pattern);
        manifest.pattern.per_projector_seeds = self.cfg.per_projector_seeds;
        self.store.write_manifest(&manifest).map_err(|e| api_err(ApiErrorKind::Internal, e.to_string()))?;
        self.emit(
            now,
            EventKind::SessionStarted {
                session_id: id.clone(),
                expected_nodes: session.expected_nodes.len(),
                light_level: req.light,
                pattern_seed: req.pattern.seed,
            },
        );
        self.active = Some(ActiveSession {
            session,
            manifest,
            started_at: now,
            timeout: None,
            texture_sent_at: None,
            last_frame_at: None,
        });
        self.apply(now, SessionEvent::Start);
        Ok(self.session(&id).expect("just created"))
    }

    fn next_session_id(&self) -> SessionId {
        let from_disk = self.store.next_session_id();
        let n = |s: &SessionId| s.as_str()[1..].parse::<u64>().unwrap_or(0);
        let seen = self.finished.keys().map(n).max().unwrap_or(0);
        if n(&from_disk) > seen {
            from_disk
        } else {
            store::format_session_id(seen + 1)
        }
    }

    pub fn session(&self, id: &SessionId) -> Option<SessionView> {
        if let Some(a) = self.active.as_ref().filter(|a| &a.session.session_id == id) {
            return Some(a.view());
        }
        self.finished.get(id).map(|(v, _)| v.clone())
    }

    pub fn sessions(&self) -> Vec<SessionView> {
        let mut all: Vec<SessionView> = self.finished.values().map(|(v, _)| v.clone()).collect();
        all.extend(self.active.as_ref().map(|a| a.view()));
        all
    }

    pub fn set_lights(&mut self, now: Timestamp, level: LightLevel) -> LightsResponse {
        let nodes: Vec<NodeId> = self.registry.connected().map(|r| r.node_id.clone()).collect();
        for n in &nodes {
            self.send_to(n, Body::LightCommand(LightCommand { session_id: None, level }));
        }
        self.emit(now, EventKind::LightsSet { level, targets: nodes.len() });
        LightsResponse { level, targets: nodes.len() }
    }

    pub fn set_pattern(&mut self, now: Timestamp, pattern: PatternSpec) -> Result<PatternResponse, ApiError> {
        pattern.validate().map_err(|e| api_err(ApiErrorKind::BadRequest, e.to_string()))?;
        let nodes: Vec<NodeId> = self.registry.connected().map(|r| r.node_id.clone()).collect();
        for n in &nodes {
            let pattern = self.pattern_for(n, pattern);
            self.send_to(n, Body::PatternCommand(PatternCommand { session_id: None, pattern }));
        }
        self.emit(now, EventKind::PatternSet { kind: pattern.kind, seed: pattern.seed, targets: nodes.len() });
        Ok(PatternResponse { pattern, targets: nodes.len() })
    }

    pub fn start_fleet(&mut self, now: Timestamp, job: FleetJob) -> Result<FleetReport, ApiError> {
        if let Some(a) = &self.active {
            return Err(api_err(
                ApiErrorKind::Conflict,
                format!("fleet jobs are rejected while session {} is running", a.session.session_id),
            ));
        }
        let to_api = |e: FleetError| match e {
            FleetError::EmptySelection => api_err(ApiErrorKind::EmptySelection, e.to_string()),
            _ => api_err(ApiErrorKind::BadRequest, e.to_string()),
        };
        let targets = resolve_targets(&job.targets, self.registry.records()).map_err(to_api)?;
        let job_id = self.next_job;
        let limit = job.concurrency_limit;
        let run = FleetRun::new(job_id, job, targets, now).map_err(to_api)?;
        self.next_job += 1;
        let selected = run.selected();
        self.fleet.insert(job_id, run);
        self.emit(now, EventKind::FleetStarted { job_id, targets: selected, limit });
        let registry = &self.registry;
        let actions = self.fleet.get_mut(&job_id).expect("inserted").pump(now, |n| is_reachable(registry.get(n)));
        self.fleet_actions(now, job_id, actions);
        Ok(self.fleet_job(job_id).expect("inserted"))
    }

    pub fn fleet_job(&self, job_id: u64) -> Option<FleetReport> {
        self.fleet.get(&job_id).map(|r| r.report())
    }

    pub fn fleet_jobs(&self) -> Vec<FleetReport> {
        self.fleet.values().map(|r| r.report()).collect()
    }
}

#[cfg(test)]
mod tests;
