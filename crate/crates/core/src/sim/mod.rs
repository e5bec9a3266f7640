//! Deterministic virtual-time cluster simulator.
//!
//! The unmodified [`Coordinator`] and one [`Agent`] per node run over a
//! modelled network (see [`network`]) with mock cameras, light controllers
//! and projectors. All state lives in ordered collections and every event is
//! keyed by `(virtual time, sequence number)`, so equal inputs produce
//! byte-identical event logs and capture sets.

pub mod network;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    capture_frame, Agent, AgentConfig, AgentEvent, AgentOutput, CaptureError, CommandBackend, CommandRun, EchoBackend,
    MockCamera,
};
use crate::coordinator::store::CaptureStore;
use crate::coordinator::{
    ApiError, ConnId, CoordOutput, Coordinator, CoordinatorConfig, EventKind, LightsResponse, NodeState, NodesResponse,
    PatternResponse, SessionView, StartSession, StoreError,
};
use crate::fleet::{FleetJob, FleetReport};
use crate::lighting::{
    LightLevel, MockLightController, MockProjector, PatternSpec, DEFAULT_PATTERN_HEIGHT, DEFAULT_PATTERN_WIDTH,
};
use crate::protocol::{
    canonical_json, decode_message, encode_message, Body, CaptureCommand, FrameChunk, FrameMetadata, Message, NodeId,
};
use crate::rng::hash64;
use crate::time::{duration_ms, Timestamp};

use network::SharedMedium;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    Crash,
    Disconnect,
    Restart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Virtual seconds from simulation start.
    pub at: f64,
    pub node_id: NodeId,
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub node_count: usize,
    #[serde(with = "duration_ms")]
    pub link_latency: Duration,
    /// Per-node link, bytes/second.
    pub link_bandwidth: f64,
    /// Shared ceiling of the coordinator NIC, bytes/second, per direction.
    pub server_nic_bandwidth: f64,
    pub seed: u64,
    pub fault_plan: Vec<FaultSpec>,
    pub frame_width: u32,
    pub frame_height: u32,
    pub staging_read_rate: f64,
    pub staging_write_rate: f64,
    #[serde(with = "duration_ms")]
    pub exposure: Duration,
    /// Nodes whose camera fails every capture.
    pub camera_failures: Vec<NodeId>,
    pub coordinator: CoordinatorConfig,
    /// Run every message through the byte codec.
    pub wire_roundtrip: bool,
    pub time_cap_secs: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        let agent = AgentConfig::default();
        Self {
            node_count: 96,
            link_latency: Duration::from_millis(1),
            link_bandwidth: 12.5e6,
            server_nic_bandwidth: 125e6,
            seed: 42,
            fault_plan: Vec::new(),
            frame_width: 640,
            frame_height: 480,
            staging_read_rate: agent.staging_read_rate,
            staging_write_rate: agent.staging_write_rate,
            exposure: Duration::from_millis(100),
            camera_failures: Vec::new(),
            coordinator: CoordinatorConfig::default(),
            wire_roundtrip: false,
            time_cap_secs: 600.0,
        }
    }
}

pub fn node_name(index: usize) -> NodeId {
    NodeId::new(format!("n{:02}", index + 1))
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidSpec(m.to_string()));
        if self.node_count == 0 {
            return bad("node_count must be at least 1");
        }
        if !(self.link_bandwidth > 0.0 && self.server_nic_bandwidth > 0.0) {
            return bad("bandwidths must be positive");
        }
        if !(self.staging_read_rate > 0.0 && self.staging_write_rate > 0.0) {
            return bad("staging rates must be positive");
        }
        if self.frame_width == 0 || self.frame_height == 0 {
            return bad("frame dimensions must be positive");
        }
        if self.coordinator.cameras_per_beam == 0 {
            return bad("cameras_per_beam must be positive");
        }
        if self.time_cap_secs.is_nan() || self.time_cap_secs <= 0.0 {
            return bad("time_cap_secs must be positive");
        }
        for f in &self.fault_plan {
            self.check_fault(f)?;
        }
        Ok(())
    }

    fn check_fault(&self, f: &FaultSpec) -> Result<usize, SimError> {
        if f.at.is_nan() || f.at < 0.0 {
            return Err(SimError::InvalidSpec(format!("fault time {} is negative", f.at)));
        }
        self.node_index(&f.node_id).ok_or_else(|| SimError::UnknownNode(f.node_id.clone()))
    }

    pub fn node_index(&self, id: &NodeId) -> Option<usize> {
        let n: usize = id.as_str().strip_prefix('n')?.parse().ok()?;
        (n >= 1 && n <= self.node_count && node_name(n - 1) == *id).then(|| n - 1)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        (0..self.node_count).map(node_name).collect()
    }

    fn coordinator_config(&self) -> CoordinatorConfig {
        let mut cfg = self.coordinator.clone();
        let needed = self.node_count.div_ceil(cfg.cameras_per_beam as usize) as u32;
        cfg.beams = cfg.beams.max(needed);
        cfg
    }

    fn agent_config(&self, index: usize) -> AgentConfig {
        let id = node_name(index);
        let cpb = self.coordinator.cameras_per_beam as usize;
        AgentConfig {
            rng_seed: hash64(&[&self.seed.to_string(), id.as_str()]),
            beam: (index / cpb) as u32,
            slot: (index % cpb) as u32,
            node_id: id,
            coordinator_addr: "sim".into(),
            staging_read_rate: self.staging_read_rate,
            staging_write_rate: self.staging_write_rate,
            frame_width: self.frame_width,
            frame_height: self.frame_height,
            ..AgentConfig::default()
        }
    }
}

/// One timed operator action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStep {
    /// Virtual seconds from simulation start.
    pub at: f64,
    #[serde(flatten)]
    pub action: Action,
}

pub type Scenario = Vec<ScenarioStep>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Capture {
        #[serde(default)]
        seed: u64,
        #[serde(default = "half")]
        density: f64,
        #[serde(default = "full")]
        light: LightLevel,
        #[serde(default)]
        pattern_width: Option<u32>,
        #[serde(default)]
        pattern_height: Option<u32>,
    },
    Lights {
        level: LightLevel,
    },
    Pattern {
        pattern: PatternSpec,
    },
    Fleet {
        job: FleetJob,
    },
}

fn half() -> f64 {
    0.5
}

fn full() -> LightLevel {
    LightLevel::Full
}

impl Action {
    pub fn capture(seed: u64, light: LightLevel) -> Self {
        Action::Capture { seed, density: 0.5, light, pattern_width: None, pattern_height: None }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid cluster spec: {0}")]
    InvalidSpec(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("virtual time cap of {cap_secs} s reached: {pending}")]
    VirtualTimeExhausted { cap_secs: f64, pending: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", content = "event")]
pub enum SimEvent {
    Coordinator(EventKind),
    Agent { node_id: NodeId, event: AgentEvent },
    Fault { node_id: NodeId, kind: FaultKind, note: String },
    Operator { action: Action, outcome: serde_json::Value },
    Warning { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub at: Timestamp,
    #[serde(flatten)]
    pub event: SimEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub virtual_duration: f64,
    pub sessions: Vec<SessionView>,
    pub fleet_jobs: Vec<FleetReport>,
    /// Frames stored per node over the whole run.
    pub delivered: BTreeMap<NodeId, u64>,
    pub warnings: Vec<String>,
    pub events: Vec<LogEntry>,
}

impl SimReport {
    /// The event log as JSON lines.
    pub fn event_log_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn total_delivered(&self) -> u64 {
        self.delivered.values().sum()
    }
}

/// Bytes one message occupies on a link. Chunk payloads are counted at their
/// raw size rather than their base64 expansion, modelling a binary transport.
pub fn wire_cost(msg: &Message) -> u64 {
    match &msg.body {
        Body::FrameChunk(c) => {
            let shell =
                Message::new(Body::FrameChunk(FrameChunk { key: c.key.clone(), index: c.index, data: Vec::new() }));
            (4 + canonical_json(&shell).len() + c.data.len()) as u64
        }
        _ => (4 + canonical_json(msg).len()) as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    Up,
    Down,
}

#[derive(Debug)]
enum Ev {
    AgentWake(usize),
    CoordWake,
    MediumWake(Dir),
    ConnectResult {
        idx: usize,
        epoch: u64,
    },
    AgentClosed {
        idx: usize,
        epoch: u64,
    },
    DeliverUp {
        conn: ConnId,
        msg: Message,
    },
    DeliverDown {
        idx: usize,
        conn: ConnId,
        msg: Message,
    },
    CaptureDone {
        idx: usize,
        epoch: u64,
        command: CaptureCommand,
        result: Box<Result<(FrameMetadata, Vec<u8>), CaptureError>>,
    },
    CommandDone {
        idx: usize,
        epoch: u64,
        job_id: u64,
        run: CommandRun,
    },
    Fault(FaultSpec),
    Operator(Action),
}

type Key = (Timestamp, u64);

struct SimNode {
    cfg: AgentConfig,
    agent: Option<Agent>,
    epoch: u64,
    link_up: bool,
    conn: Option<ConnId>,
    camera: MockCamera,
    shell: EchoBackend,
    wake: Option<Key>,
}

#[derive(Debug, Clone, Copy)]
struct ConnState {
    idx: usize,
    open: bool,
}

pub struct Simulation {
    spec: ClusterSpec,
    now: Timestamp,
    seq: u64,
    queue: BTreeMap<Key, Ev>,
    nodes: Vec<SimNode>,
    coord: Coordinator,
    coord_wake: Option<Key>,
    up: SharedMedium<(ConnId, Message)>,
    down: SharedMedium<(ConnId, Message)>,
    medium_wake: [Option<Key>; 2],
    conns: BTreeMap<ConnId, ConnState>,
    next_conn: ConnId,
    /// Operator actions, faults and hardware completions still queued.
    pending_work: usize,
    log: Vec<LogEntry>,
    warnings: Vec<String>,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation").field("now", &self.now).field("nodes", &self.nodes.len()).finish_non_exhaustive()
    }
}

impl Simulation {
    /// Boots every agent at time zero. Captures land under `captures_dir`.
    pub fn new(spec: ClusterSpec, captures_dir: &Path) -> Result<Self, SimError> {
        spec.validate()?;
        let store = CaptureStore::open(captures_dir)?;
        let coord = Coordinator::new(spec.coordinator_config(), store);
        let mut sim = Self {
            up: SharedMedium::new(spec.server_nic_bandwidth, spec.link_bandwidth),
            down: SharedMedium::new(spec.server_nic_bandwidth, spec.link_bandwidth),
            nodes: Vec::with_capacity(spec.node_count),
            now: Timestamp::ZERO,
            seq: 0,
            queue: BTreeMap::new(),
            coord,
            coord_wake: None,
            medium_wake: [None, None],
            conns: BTreeMap::new(),
            next_conn: 1,
            pending_work: 0,
            log: Vec::new(),
            warnings: Vec::new(),
            spec,
        };
        for i in 0..sim.spec.node_count {
            let cfg = sim.spec.agent_config(i);
            let camera = MockCamera {
                exposure: sim.spec.exposure,
                fail: sim.spec.camera_failures.contains(&cfg.node_id),
                captures: 0,
            };
            sim.nodes.push(SimNode {
                cfg,
                agent: None,
                epoch: 0,
                link_up: true,
                conn: None,
                camera,
                shell: EchoBackend::default(),
                wake: None,
            });
        }
        for i in 0..sim.spec.node_count {
            sim.boot_agent(i, false);
        }
        for f in sim.spec.fault_plan.clone() {
            sim.push_fault(f);
        }
        Ok(sim)
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coord
    }

    pub fn events(&self) -> &[LogEntry] {
        &self.log
    }

    /// Adds a fault to the plan.
    pub fn inject_fault(&mut self, fault: FaultSpec) -> Result<(), SimError> {
        self.spec.check_fault(&fault)?;
        self.spec.fault_plan.push(fault.clone());
        self.push_fault(fault);
        Ok(())
    }

    fn push_fault(&mut self, f: FaultSpec) {
        let at = Timestamp::from_secs_f64(f.at).max(self.now);
        self.pending_work += 1;
        self.push(at, Ev::Fault(f));
    }

    pub fn schedule(&mut self, step: ScenarioStep) {
        let at = Timestamp::from_secs_f64(step.at.max(0.0)).max(self.now);
        self.pending_work += 1;
        self.push(at, Ev::Operator(step.action));
    }

    fn push(&mut self, at: Timestamp, ev: Ev) -> Key {
        let key = (at, self.seq);
        self.seq += 1;
        self.queue.insert(key, ev);
        key
    }

    fn reschedule(&mut self, slot: Slot, at: Option<Timestamp>) {
        let current = match slot {
            Slot::Agent(i) => self.nodes[i].wake,
            Slot::Coord => self.coord_wake,
            Slot::Medium(d) => self.medium_wake[d as usize],
        };
        if current.map(|k| k.0) == at {
            return;
        }
        if let Some(k) = current {
            self.queue.remove(&k);
        }
        let new = at.map(|t| {
            let t = t.max(self.now);
            let ev = match slot {
                Slot::Agent(i) => Ev::AgentWake(i),
                Slot::Coord => Ev::CoordWake,
                Slot::Medium(d) => Ev::MediumWake(d),
            };
            self.push(t, ev)
        });
        match slot {
            Slot::Agent(i) => self.nodes[i].wake = new,
            Slot::Coord => self.coord_wake = new,
            Slot::Medium(d) => self.medium_wake[d as usize] = new,
        }
    }

    fn record(&mut self, event: SimEvent) {
        self.log.push(LogEntry { at: self.now, event });
    }

    fn warn(&mut self, message: String) {
        self.warnings.push(message.clone());
        self.record(SimEvent::Warning { message });
    }

    fn boot_agent(&mut self, idx: usize, after_restart: bool) {
        let node = &mut self.nodes[idx];
        let mut agent = Agent::new(node.cfg.clone()).expect("spec-derived agent config is valid");
        // one light controller and one projector per beam, on slot 0
        if node.cfg.slot == 0 {
            agent = agent
                .with_lights(Box::new(MockLightController::new(node.cfg.beam)))
                .with_projector(Box::new(MockProjector::default()));
        }
        node.epoch += 1;
        if after_restart {
            agent.start_delayed(self.now);
        } else {
            agent.start(self.now, Duration::ZERO);
        }
        node.agent = Some(agent);
        self.flush_agent(idx);
    }

    // ---- event processing ----

    /// Processes the next event. Returns false when the queue is empty.
    fn step(&mut self) -> Result<bool, SimError> {
        let Some((key, ev)) = self.queue.pop_first() else { return Ok(false) };
        if key.0.as_secs_f64() > self.spec.time_cap_secs {
            self.queue.insert(key, ev);
            return Err(SimError::VirtualTimeExhausted {
                cap_secs: self.spec.time_cap_secs,
                pending: self.pending_summary(),
            });
        }
        debug_assert!(key.0 >= self.now, "virtual time went backwards");
        self.now = key.0;
        match ev {
            Ev::AgentWake(i) => {
                self.nodes[i].wake = None;
                if let Some(a) = self.nodes[i].agent.as_mut() {
                    a.handle_timeout(self.now);
                }
                self.flush_agent(i);
            }
            Ev::CoordWake => {
                self.coord_wake = None;
                self.coord.handle_timeout(self.now);
                self.flush_coord();
            }
            Ev::MediumWake(d) => {
                self.medium_wake[d as usize] = None;
                self.pump_medium(d);
            }
            Ev::ConnectResult { idx, epoch } => self.on_connect_result(idx, epoch),
            Ev::AgentClosed { idx, epoch } => {
                if self.nodes[idx].epoch == epoch && self.nodes[idx].conn.is_none() {
                    if let Some(a) = self.nodes[idx].agent.as_mut() {
                        a.on_disconnected(self.now);
                    }
                    self.flush_agent(idx);
                }
            }
            Ev::DeliverUp { conn, msg } => {
                if self.conns.get(&conn).is_some_and(|c| c.open) {
                    self.coord.on_message(self.now, conn, msg);
                    self.flush_coord();
                }
            }
            Ev::DeliverDown { idx, conn, msg } => {
                if self.nodes[idx].conn == Some(conn) {
                    if let Some(a) = self.nodes[idx].agent.as_mut() {
                        a.on_message(self.now, msg);
                    }
                    self.flush_agent(idx);
                }
            }
            Ev::CaptureDone { idx, epoch, command, result } => {
                self.pending_work -= 1;
                if self.nodes[idx].epoch == epoch {
                    if let Some(a) = self.nodes[idx].agent.as_mut() {
                        a.on_capture_finished(self.now, &command, *result);
                    }
                    self.flush_agent(idx);
                }
            }
            Ev::CommandDone { idx, epoch, job_id, run } => {
                self.pending_work -= 1;
                if self.nodes[idx].epoch == epoch {
                    if let Some(a) = self.nodes[idx].agent.as_mut() {
                        a.on_command_finished(self.now, job_id, run);
                    }
                    self.flush_agent(idx);
                }
            }
            Ev::Fault(f) => {
                self.pending_work -= 1;
                self.apply_fault(f);
            }
            Ev::Operator(action) => {
                self.pending_work -= 1;
                self.operate(action);
            }
        }
        Ok(true)
    }

    fn on_connect_result(&mut self, idx: usize, epoch: u64) {
        if self.nodes[idx].epoch != epoch || self.nodes[idx].agent.is_none() {
            return;
        }
        if self.nodes[idx].link_up {
            let conn = self.next_conn;
            self.next_conn += 1;
            self.conns.insert(conn, ConnState { idx, open: true });
            self.nodes[idx].conn = Some(conn);
            self.coord.on_connection_opened(self.now, conn);
            self.flush_coord();
            if let Some(a) = self.nodes[idx].agent.as_mut() {
                a.on_connected(self.now);
            }
        } else if let Some(a) = self.nodes[idx].agent.as_mut() {
            a.on_connect_failed(self.now);
        }
        self.flush_agent(idx);
    }

    fn flush_agent(&mut self, idx: usize) {
        while let Some(out) = self.nodes[idx].agent.as_mut().and_then(|a| a.poll_output()) {
            match out {
                AgentOutput::Connect => {
                    let epoch = self.nodes[idx].epoch;
                    let at = self.now + self.spec.link_latency * 2;
                    self.push(at, Ev::ConnectResult { idx, epoch });
                }
                AgentOutput::Send(msg) => {
                    if let Some(conn) = self.nodes[idx].conn {
                        let msg = self.over_wire(msg);
                        let cost = wire_cost(&msg);
                        self.pump_medium(Dir::Up);
                        self.up.enqueue(self.now, idx, cost, (conn, msg));
                        self.reschedule(Slot::Medium(Dir::Up), self.up.next_completion());
                    }
                }
                AgentOutput::Capture { command, received_at } => {
                    let node = &mut self.nodes[idx];
                    let res = capture_frame(
                        &mut node.camera,
                        &node.cfg.node_id,
                        (node.cfg.frame_width, node.cfg.frame_height),
                        &command,
                        received_at,
                    );
                    let epoch = node.epoch;
                    let at = self.now + node.camera.exposure;
                    self.pending_work += 1;
                    self.push(at, Ev::CaptureDone { idx, epoch, command, result: Box::new(res) });
                }
                AgentOutput::Execute { job_id, command, timeout } => {
                    let node = &mut self.nodes[idx];
                    let run = node.shell.run(&command, timeout);
                    let epoch = node.epoch;
                    let at = self.now + run.elapsed;
                    self.pending_work += 1;
                    self.push(at, Ev::CommandDone { idx, epoch, job_id, run });
                }
                AgentOutput::Log(event) => {
                    let node_id = self.nodes[idx].cfg.node_id.clone();
                    self.record(SimEvent::Agent { node_id, event });
                }
            }
        }
        let wake = self.nodes[idx].agent.as_ref().and_then(|a| a.poll_timeout());
        self.reschedule(Slot::Agent(idx), wake);
    }

    fn flush_coord(&mut self) {
        while let Some(out) = self.coord.poll_output() {
            match out {
                CoordOutput::Send { conn, msg } => {
                    let Some(state) = self.conns.get(&conn).copied().filter(|c| c.open) else { continue };
                    if self.nodes[state.idx].conn != Some(conn) {
                        continue;
                    }
                    let msg = self.over_wire(msg);
                    let cost = wire_cost(&msg);
                    self.pump_medium(Dir::Down);
                    self.down.enqueue(self.now, state.idx, cost, (conn, msg));
                    self.reschedule(Slot::Medium(Dir::Down), self.down.next_completion());
                }
                CoordOutput::Close { conn } => {
                    let Some(state) = self.conns.get(&conn).copied().filter(|c| c.open) else { continue };
                    let idx = state.idx;
                    self.close_conn(conn);
                    if self.nodes[idx].conn == Some(conn) {
                        self.nodes[idx].conn = None;
                        self.drop_queues(idx);
                        let epoch = self.nodes[idx].epoch;
                        let at = self.now + self.spec.link_latency;
                        self.push(at, Ev::AgentClosed { idx, epoch });
                    }
                }
                CoordOutput::Event(e) => {
                    self.now = self.now.max(e.at);
                    self.record(SimEvent::Coordinator(e.kind));
                }
            }
        }
        let wake = self.coord.poll_timeout();
        self.reschedule(Slot::Coord, wake);
    }

    fn over_wire(&self, msg: Message) -> Message {
        if !self.spec.wire_roundtrip {
            return msg;
        }
        let bytes = encode_message(&msg).expect("protocol messages fit in a frame");
        decode_message(&bytes).expect("encoded messages decode")
    }

    fn close_conn(&mut self, conn: ConnId) {
        if let Some(c) = self.conns.get_mut(&conn) {
            c.open = false;
        }
    }

    /// Discards everything queued on a node's links.
    fn drop_queues(&mut self, idx: usize) {
        self.pump_medium(Dir::Up);
        self.pump_medium(Dir::Down);
        self.up.clear_flow(idx);
        self.down.clear_flow(idx);
        self.reschedule(Slot::Medium(Dir::Up), self.up.next_completion());
        self.reschedule(Slot::Medium(Dir::Down), self.down.next_completion());
    }

    fn pump_medium(&mut self, d: Dir) {
        let done = match d {
            Dir::Up => self.up.advance(self.now),
            Dir::Down => self.down.advance(self.now),
        };
        let mut flushed = Vec::new();
        for c in done {
            let (conn, msg) = c.item;
            let at = self.now + self.spec.link_latency;
            match d {
                Dir::Up => {
                    self.push(at, Ev::DeliverUp { conn, msg });
                    if c.drained {
                        flushed.push((c.flow, conn));
                    }
                }
                Dir::Down => {
                    self.push(at, Ev::DeliverDown { idx: c.flow, conn, msg });
                }
            }
        }
        let next = match d {
            Dir::Up => self.up.next_completion(),
            Dir::Down => self.down.next_completion(),
        };
        self.reschedule(Slot::Medium(d), next);
        for (idx, conn) in flushed {
            if self.nodes[idx].conn == Some(conn) {
                if let Some(a) = self.nodes[idx].agent.as_mut() {
                    a.on_flushed(self.now);
                }
                self.flush_agent(idx);
            }
        }
    }

    fn apply_fault(&mut self, f: FaultSpec) {
        let idx = self.spec.node_index(&f.node_id).expect("faults are validated");
        let node_id = f.node_id.clone();
        let note = match f.kind {
            FaultKind::Crash => {
                if self.nodes[idx].agent.is_none() {
                    self.warn(format!("crash of {node_id} ignored: already down"));
                    return;
                }
                self.nodes[idx].agent = None;
                self.nodes[idx].epoch += 1;
                self.sever(idx);
                self.reschedule(Slot::Agent(idx), None);
                "agent stopped; staged frames lost".to_string()
            }
            FaultKind::Disconnect => {
                if self.nodes[idx].agent.is_none() || !self.nodes[idx].link_up {
                    self.warn(format!("disconnect of {node_id} ignored: not connected"));
                    return;
                }
                self.nodes[idx].link_up = false;
                self.sever(idx);
                if let Some(a) = self.nodes[idx].agent.as_mut() {
                    a.on_disconnected(self.now);
                }
                self.flush_agent(idx);
                "link cut".to_string()
            }
            FaultKind::Restart => {
                if self.nodes[idx].agent.is_none() {
                    self.nodes[idx].link_up = true;
                    self.boot_agent(idx, true);
                    "agent restarted".to_string()
                } else if !self.nodes[idx].link_up {
                    self.nodes[idx].link_up = true;
                    "link restored".to_string()
                } else {
                    self.warn(format!("restart of {node_id} ignored: node is healthy"));
                    return;
                }
            }
        };
        self.record(SimEvent::Fault { node_id, kind: f.kind, note });
    }

    /// Cuts the node's connection without telling the coordinator.
    fn sever(&mut self, idx: usize) {
        if let Some(conn) = self.nodes[idx].conn.take() {
            self.close_conn(conn);
        }
        self.drop_queues(idx);
    }

    fn operate(&mut self, action: Action) {
        let outcome = match &action {
            Action::Capture { seed, density, light, pattern_width, pattern_height } => {
                let pattern = PatternSpec::random_dot(
                    *seed,
                    *density,
                    pattern_width.unwrap_or(DEFAULT_PATTERN_WIDTH),
                    pattern_height.unwrap_or(DEFAULT_PATTERN_HEIGHT),
                );
                to_json(self.start_session(StartSession { pattern, light: *light }))
            }
            Action::Lights { level } => to_json(Ok::<_, ApiError>(self.set_lights(*level))),
            Action::Pattern { pattern } => to_json(self.set_pattern(*pattern)),
            Action::Fleet { job } => to_json(self.start_fleet(job.clone())),
        };
        self.record(SimEvent::Operator { action, outcome });
    }

    // ---- operator API at the current virtual time ----

    pub fn nodes(&self) -> NodesResponse {
        self.coord.nodes()
    }

    pub fn start_session(&mut self, req: StartSession) -> Result<SessionView, ApiError> {
        let r = self.coord.start_session(self.now, req);
        self.flush_coord();
        r
    }

    pub fn set_lights(&mut self, level: LightLevel) -> LightsResponse {
        let r = self.coord.set_lights(self.now, level);
        self.flush_coord();
        r
    }

    pub fn set_pattern(&mut self, pattern: PatternSpec) -> Result<PatternResponse, ApiError> {
        let r = self.coord.set_pattern(self.now, pattern);
        self.flush_coord();
        r
    }

    pub fn start_fleet(&mut self, job: FleetJob) -> Result<FleetReport, ApiError> {
        let r = self.coord.start_fleet(self.now, job);
        self.flush_coord();
        r
    }

    pub fn session(&self, id: &crate::SessionId) -> Option<SessionView> {
        self.coord.session(id)
    }

    pub fn fleet_job(&self, id: u64) -> Option<FleetReport> {
        self.coord.fleet_job(id)
    }

    // ---- running ----

    /// Processes every event up to and including `t`.
    pub fn run_until(&mut self, t: Timestamp) -> Result<(), SimError> {
        while self.queue.first_key_value().is_some_and(|(k, _)| k.0 <= t) {
            self.step()?;
        }
        self.now = self.now.max(t);
        Ok(())
    }

    /// Runs until every live node is registered.
    pub fn boot(&mut self) -> Result<(), SimError> {
        self.run_while(|s| !s.all_registered())
    }

    fn all_registered(&self) -> bool {
        self.nodes.iter().all(|n| !n.link_up || n.agent.as_ref().is_none_or(|a| a.is_registered()))
    }

    /// Runs until nothing is left to do but heartbeats.
    pub fn run_to_quiescence(&mut self) -> Result<(), SimError> {
        self.run_while(|s| !s.quiescent())
    }

    fn run_while(&mut self, busy: impl Fn(&Self) -> bool) -> Result<(), SimError> {
        while busy(self) {
            if !self.step()? {
                break;
            }
        }
        Ok(())
    }

    pub fn quiescent(&self) -> bool {
        self.pending_work == 0
            && !self.coord.session_active()
            && self.coord.fleet_jobs().iter().all(|j| j.done)
            && self.all_registered()
            && self.nodes.iter().all(|n| !n.link_up || n.agent.as_ref().is_none_or(|a| !a.busy()))
    }

    fn pending_summary(&self) -> String {
        let busy = self.nodes.iter().filter(|n| n.agent.as_ref().is_some_and(|a| a.busy())).count();
        format!(
            "{} queued actions, session active: {}, {} busy agents",
            self.pending_work,
            self.coord.session_active(),
            busy
        )
    }

    pub fn report(&self) -> SimReport {
        let nodes = self.coord.nodes();
        SimReport {
            virtual_duration: self.now.as_secs_f64(),
            sessions: self.coord.sessions(),
            fleet_jobs: self.coord.fleet_jobs(),
            delivered: nodes.nodes.iter().map(|n| (n.node_id.clone(), n.frames_delivered)).collect(),
            warnings: self.warnings.clone(),
            events: self.log.clone(),
        }
    }

    /// Nodes the coordinator currently lists as connected.
    pub fn connected_nodes(&self) -> usize {
        self.coord.nodes().nodes.iter().filter(|n| n.state == NodeState::Connected).count()
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Agent(usize),
    Coord,
    Medium(Dir),
}

fn to_json<T: Serialize>(r: Result<T, ApiError>) -> serde_json::Value {
    match r {
        Ok(v) => serde_json::json!({ "ok": v }),
        Err(e) => serde_json::json!({ "error": e }),
    }
}

/// Executes `scenario` on a fresh cluster until it quiesces.
pub fn run_cluster(spec: ClusterSpec, scenario: &[ScenarioStep], captures_dir: &Path) -> Result<SimReport, SimError> {
    let mut sim = Simulation::new(spec, captures_dir)?;
    for step in scenario {
        sim.schedule(step.clone());
    }
    sim.run_to_quiescence()?;
    Ok(sim.report())
}
