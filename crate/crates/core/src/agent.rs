//! Node agent: the per-camera client.
//!
//! [`Agent`] is a sans-IO state machine. A driver (the simulator, or the TCP
//! runtime) feeds it connection events, decoded messages, timer expiries and
//! completion of the work it asked for, and drains [`AgentOutput`]s. Captures
//! and fleet commands are executed by the driver against a [`CaptureBackend`]
//! or [`CommandBackend`] so that slow hardware never blocks heartbeats.
//!
//! Frames move through a local pipeline: capture → SD write → SD read →
//! chunked upload → coordinator receipt. A frame stays staged until the
//! coordinator's receipt arrives, so a disconnect at any point leads to a
//! complete re-send after reconnection.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lighting::{generate_pattern, LightController, PatternKind, Projector};
use crate::protocol::{
    sha256_hex, AckFailure, AckStep, Body, CaptureAck, CaptureCommand, ErrorCode, ErrorMessage, FleetOutcome,
    FleetResult, FrameChunk, FrameComplete, FrameHeader, FrameKey, FrameMetadata, Heartbeat, Hello, Message, NodeId,
    Phase, SessionId, MAX_CHUNK_LEN,
};
use crate::rng::{hash64, SplitMix64};
use crate::time::{duration_ms, Timestamp};

pub const DEFAULT_FRAME_WIDTH: u32 = 1920;
pub const DEFAULT_FRAME_HEIGHT: u32 = 1080;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub node_id: NodeId,
    pub beam: u32,
    pub slot: u32,
    pub coordinator_addr: String,
    #[serde(with = "duration_ms")]
    pub reconnect_base: Duration,
    pub jitter_fraction: f64,
    #[serde(with = "duration_ms")]
    pub heartbeat_period: Duration,
    /// SD card read throughput, bytes/second.
    pub staging_read_rate: f64,
    /// SD card write throughput, bytes/second.
    pub staging_write_rate: f64,
    pub rng_seed: u64,
    pub frame_width: u32,
    pub frame_height: u32,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            node_id: NodeId::new("n01"),
            beam: 0,
            slot: 0,
            coordinator_addr: "127.0.0.1:7070".into(),
            reconnect_base: Duration::from_secs(2),
            jitter_fraction: 0.1,
            heartbeat_period: Duration::from_secs(1),
            staging_read_rate: 20e6,
            staging_write_rate: 10e6,
            rng_seed: 0,
            frame_width: DEFAULT_FRAME_WIDTH,
            frame_height: DEFAULT_FRAME_HEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid agent config: {0}")]
pub struct ConfigError(pub &'static str);

impl AgentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.reconnect_base.is_zero() {
            return Err(ConfigError("reconnect_base must be positive"));
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err(ConfigError("jitter_fraction must lie in [0, 1)"));
        }
        if !(self.staging_read_rate > 0.0 && self.staging_write_rate > 0.0) {
            return Err(ConfigError("staging rates must be positive"));
        }
        if self.heartbeat_period.is_zero() {
            return Err(ConfigError("heartbeat_period must be positive"));
        }
        if self.frame_width == 0 || self.frame_height == 0 {
            return Err(ConfigError("frame dimensions must be positive"));
        }
        Ok(())
    }
}

/// Constant-interval reconnect policy with symmetric jitter: the result is
/// `reconnect_base · (1 + j)`, `j` uniform in `[-jitter, +jitter]`. The attempt
/// number does not change the interval.
pub fn next_reconnect_delay(_attempt: u32, cfg: &AgentConfig, rng: &mut SplitMix64) -> Duration {
    let u = rng.next_f64();
    let j = (2.0 * u - 1.0) * cfg.jitter_fraction;
    cfg.reconnect_base.mul_f64(1.0 + j)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureRequest {
    pub session_id: SessionId,
    pub node_id: NodeId,
    pub phase: Phase,
    pub pattern_seed: Option<u64>,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedImage {
    pub bytes: Vec<u8>,
    pub width: u32,
    pub height: u32,
    /// Time from trigger to image in memory.
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("capture backend failure: {0}")]
pub struct BackendFailure(pub String);

pub trait CaptureBackend: Send {
    fn capture(&mut self, req: &CaptureRequest) -> Result<CapturedImage, BackendFailure>;
}

/// Binary PPM (P6) whose pixel bytes come from SplitMix64 seeded with the
/// hash of `(session, node, phase, pattern seed)`.
pub fn mock_frame_bytes(req: &CaptureRequest) -> Vec<u8> {
    let seed_text = req.pattern_seed.map(|s| s.to_string()).unwrap_or_default();
    let seed = hash64(&[req.session_id.as_str(), req.node_id.as_str(), req.phase.dir_name(), &seed_text]);
    let header = format!("P6\n{} {}\n255\n", req.width, req.height);
    let pixels = req.width as usize * req.height as usize * 3;
    let mut out = vec![0u8; header.len() + pixels];
    out[..header.len()].copy_from_slice(header.as_bytes());
    SplitMix64::new(seed).fill_bytes(&mut out[header.len()..]);
    out
}

/// Deterministic stand-in camera.
#[derive(Debug, Clone)]
pub struct MockCamera {
    pub exposure: Duration,
    /// Fail every capture with `BackendFailure`.
    pub fail: bool,
    pub captures: usize,
}

impl Default for MockCamera {
    fn default() -> Self {
        Self { exposure: Duration::from_millis(100), fail: false, captures: 0 }
    }
}

impl CaptureBackend for MockCamera {
    fn capture(&mut self, req: &CaptureRequest) -> Result<CapturedImage, BackendFailure> {
        if self.fail {
            return Err(BackendFailure("injected camera fault".into()));
        }
        self.captures += 1;
        Ok(CapturedImage { bytes: mock_frame_bytes(req), width: req.width, height: req.height, elapsed: self.exposure })
    }
}

/// Shells out to an external still-capture program.
///
/// `{output}`, `{width}` and `{height}` in `args` are substituted; the program
/// must write the image to `{output}`.
#[derive(Debug, Clone)]
pub struct CommandCamera {
    pub program: String,
    pub args: Vec<String>,
    pub scratch_dir: std::path::PathBuf,
}

impl CommandCamera {
    /// `raspistill` writing a full-resolution still with no preview delay.
    pub fn raspistill(scratch_dir: impl Into<std::path::PathBuf>) -> Self {
        Self {
            program: "raspistill".into(),
            args: ["-n", "-t", "1", "-w", "{width}", "-h", "{height}", "-o", "{output}"]
                .into_iter()
                .map(String::from)
                .collect(),
            scratch_dir: scratch_dir.into(),
        }
    }
}

impl CaptureBackend for CommandCamera {
    fn capture(&mut self, req: &CaptureRequest) -> Result<CapturedImage, BackendFailure> {
        let output = self.scratch_dir.join(format!("{}-{}-{}.img", req.session_id, req.node_id, req.phase.dir_name()));
        let output_text = output.to_string_lossy().into_owned();
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                a.replace("{output}", &output_text)
                    .replace("{width}", &req.width.to_string())
                    .replace("{height}", &req.height.to_string())
            })
            .collect();
        let started = std::time::Instant::now();
        let status = std::process::Command::new(&self.program)
            .args(&args)
            .status()
            .map_err(|e| BackendFailure(format!("{}: {e}", self.program)))?;
        if !status.success() {
            return Err(BackendFailure(format!("{} exited with {status}", self.program)));
        }
        let bytes = std::fs::read(&output).map_err(|e| BackendFailure(e.to_string()))?;
        let _ = std::fs::remove_file(&output);
        Ok(CapturedImage { bytes, width: req.width, height: req.height, elapsed: started.elapsed() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CaptureError {
    #[error(transparent)]
    BackendFailure(#[from] BackendFailure),
    #[error("capture took {elapsed:?}, deadline was {deadline:?}")]
    DeadlineExceeded { elapsed: Duration, deadline: Duration },
}

impl From<&CaptureError> for AckFailure {
    fn from(e: &CaptureError) -> Self {
        match e {
            CaptureError::BackendFailure(b) => AckFailure::BackendFailure(b.0.clone()),
            CaptureError::DeadlineExceeded { .. } => AckFailure::DeadlineExceeded(e.to_string()),
        }
    }
}

/// Runs one exposure and builds its metadata. `started_at` is when the
/// command was received; the deadline is measured from there.
pub fn capture_frame(
    backend: &mut dyn CaptureBackend,
    node_id: &NodeId,
    resolution: (u32, u32),
    cmd: &CaptureCommand,
    started_at: Timestamp,
) -> Result<(FrameMetadata, Vec<u8>), CaptureError> {
    let req = CaptureRequest {
        session_id: cmd.session_id.clone(),
        node_id: node_id.clone(),
        phase: cmd.phase,
        pattern_seed: cmd.pattern_ref.map(|p| p.seed),
        width: resolution.0,
        height: resolution.1,
    };
    let image = backend.capture(&req)?;
    if image.elapsed > cmd.deadline() {
        return Err(CaptureError::DeadlineExceeded { elapsed: image.elapsed, deadline: cmd.deadline() });
    }
    let meta = FrameMetadata {
        node_id: node_id.clone(),
        session_id: cmd.session_id.clone(),
        phase: cmd.phase,
        width: image.width,
        height: image.height,
        byte_size: image.bytes.len() as u64,
        checksum: sha256_hex(&image.bytes),
        captured_at: started_at + image.elapsed,
    };
    Ok((meta, image.bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransferError {
    #[error("frame is empty")]
    InvalidFrame,
    #[error("staged bytes do not match the frame checksum")]
    ChecksumMismatch,
    #[error("link went down mid-transfer")]
    LinkDown,
}

/// Local staging cost model for one frame: SD write, SD read, then network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferPlan {
    pub write: Duration,
    pub read: Duration,
    pub network: Duration,
    pub messages: usize,
}

impl TransferPlan {
    pub fn total(&self) -> Duration {
        self.write + self.read + self.network
    }
}

/// Validates a frame for upload and prices its staging and serialization
/// time at `link_rate` bytes/second.
pub fn plan_transfer(
    meta: &FrameMetadata,
    bytes: &[u8],
    cfg: &AgentConfig,
    link_rate: f64,
) -> Result<TransferPlan, TransferError> {
    if bytes.is_empty() || meta.byte_size == 0 {
        return Err(TransferError::InvalidFrame);
    }
    if meta.byte_size != bytes.len() as u64 || sha256_hex(bytes) != meta.checksum {
        return Err(TransferError::ChecksumMismatch);
    }
    let n = bytes.len() as f64;
    Ok(TransferPlan {
        write: Duration::from_secs_f64(n / cfg.staging_write_rate),
        read: Duration::from_secs_f64(n / cfg.staging_read_rate),
        network: Duration::from_secs_f64(n / link_rate),
        messages: bytes.len().div_ceil(MAX_CHUNK_LEN) + 2,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReceipt {
    pub key: FrameKey,
    pub bytes: u64,
    pub attempts: u32,
    pub checksum_verified: bool,
}

/// Runs maintenance commands. `run` may block; drivers call it off the
/// agent's event path.
pub trait CommandBackend: Send {
    fn run(&mut self, command: &str, timeout: Duration) -> CommandRun;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandRun {
    pub outcome: FleetOutcome,
    pub elapsed: Duration,
}

/// Echoes the command back and records it.
#[derive(Debug, Clone)]
pub struct EchoBackend {
    pub run_time: Duration,
    pub history: Vec<String>,
}

impl Default for EchoBackend {
    fn default() -> Self {
        Self { run_time: Duration::from_millis(200), history: Vec::new() }
    }
}

impl CommandBackend for EchoBackend {
    fn run(&mut self, command: &str, timeout: Duration) -> CommandRun {
        self.history.push(command.to_string());
        if self.run_time > timeout {
            return CommandRun { outcome: FleetOutcome::TimedOut, elapsed: timeout };
        }
        let output = command.strip_prefix("echo ").unwrap_or(command).to_string();
        CommandRun { outcome: FleetOutcome::Exited { code: 0, output }, elapsed: self.run_time }
    }
}

/// Runs the command through `sh -c`, killing it at the timeout.
#[derive(Debug, Clone, Default)]
pub struct ShellBackend;

impl CommandBackend for ShellBackend {
    fn run(&mut self, command: &str, timeout: Duration) -> CommandRun {
        use std::io::Read;
        use std::process::{Command, Stdio};

        let started = std::time::Instant::now();
        let child = Command::new("sh").arg("-c").arg(command).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn();
        let mut child = match child {
            Ok(c) => c,
            Err(e) => {
                return CommandRun {
                    outcome: FleetOutcome::Exited { code: 127, output: e.to_string() },
                    elapsed: started.elapsed(),
                }
            }
        };
        loop {
            match child.try_wait() {
                Ok(Some(status)) => {
                    let mut output = String::new();
                    if let Some(mut out) = child.stdout.take() {
                        let _ = out.read_to_string(&mut output);
                    }
                    if let Some(mut err) = child.stderr.take() {
                        let _ = err.read_to_string(&mut output);
                    }
                    return CommandRun {
                        outcome: FleetOutcome::Exited { code: status.code().unwrap_or(-1), output },
                        elapsed: started.elapsed(),
                    };
                }
                Ok(None) if started.elapsed() >= timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return CommandRun { outcome: FleetOutcome::TimedOut, elapsed: started.elapsed() };
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    return CommandRun {
                        outcome: FleetOutcome::Exited { code: -1, output: e.to_string() },
                        elapsed: started.elapsed(),
                    }
                }
            }
        }
    }
}

/// Something the agent reports for the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum AgentEvent {
    Booted,
    ConnectAttempt { attempt: u32 },
    ConnectFailed,
    Connected,
    Registered,
    Disconnected,
    Rejected { code: ErrorCode, message: String },
    LightsApplied { level: crate::LightLevel, ok: bool },
    PatternShown { kind: PatternKind, ok: bool },
    CaptureStarted { key: FrameKey },
    CaptureFailed { key: FrameKey, failure: AckFailure },
    FrameStaged { key: FrameKey, bytes: u64 },
    TransferStarted { key: FrameKey, attempt: u32 },
    TransferReceipt(TransferReceipt),
    FrameDropped { key: FrameKey, reason: String },
    FleetExecStart { job_id: u64 },
    FleetExecEnd { job_id: u64, outcome: FleetOutcome },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentOutput {
    /// Open a connection to the coordinator; answer with `on_connected` or
    /// `on_connect_failed`.
    Connect,
    Send(Message),
    /// Run `capture_frame`; answer with `on_capture_finished`.
    Capture {
        command: CaptureCommand,
        received_at: Timestamp,
    },
    /// Run a fleet command; answer with `on_command_finished`.
    Execute {
        job_id: u64,
        command: String,
        timeout: Duration,
    },
    Log(AgentEvent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Timer {
    Reconnect,
    Heartbeat,
    Sd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Link {
    Down,
    Connecting,
    Connected { registered: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Writing,
    Staged,
    Reading,
    Ready,
    Sending,
    AwaitingReceipt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SdOp {
    Write,
    Read,
}

#[derive(Debug)]
struct StagedFrame {
    meta: FrameMetadata,
    bytes: Vec<u8>,
    stage: Stage,
    attempts: u32,
    checksum_retries_left: u32,
}

#[derive(Debug)]
struct Upload {
    key: FrameKey,
    /// 0 = header, 1..=chunks = chunk i-1, chunks+1 = complete.
    next: usize,
    chunks: usize,
}

pub struct Agent {
    cfg: AgentConfig,
    rng: SplitMix64,
    link: Link,
    attempt: u32,
    hb_seq: u64,
    timers: BTreeMap<Timer, Timestamp>,
    outbox: VecDeque<AgentOutput>,
    lights: Option<Box<dyn LightController>>,
    projector: Option<Box<dyn Projector>>,
    capturing: BTreeSet<FrameKey>,
    frames: BTreeMap<FrameKey, StagedFrame>,
    sd_queue: VecDeque<(FrameKey, SdOp)>,
    sd_busy: Option<(FrameKey, SdOp)>,
    send_queue: VecDeque<FrameKey>,
    upload: Option<Upload>,
    frame_msg_in_flight: bool,
    jobs: BTreeSet<u64>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("node_id", &self.cfg.node_id)
            .field("link", &self.link)
            .field("staged", &self.frames.len())
            .finish_non_exhaustive()
    }
}

impl Agent {
    pub fn new(cfg: AgentConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        Ok(Self {
            rng: SplitMix64::new(cfg.rng_seed),
            cfg,
            link: Link::Down,
            attempt: 0,
            hb_seq: 0,
            timers: BTreeMap::new(),
            outbox: VecDeque::new(),
            lights: None,
            projector: None,
            capturing: BTreeSet::new(),
            frames: BTreeMap::new(),
            sd_queue: VecDeque::new(),
            sd_busy: None,
            send_queue: VecDeque::new(),
            upload: None,
            frame_msg_in_flight: false,
            jobs: BTreeSet::new(),
        })
    }

    pub fn with_lights(mut self, controller: Box<dyn LightController>) -> Self {
        self.lights = Some(controller);
        self
    }

    pub fn with_projector(mut self, projector: Box<dyn Projector>) -> Self {
        self.projector = Some(projector);
        self
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn node_id(&self) -> &NodeId {
        &self.cfg.node_id
    }

    pub fn is_connected(&self) -> bool {
        matches!(self.link, Link::Connected { .. })
    }

    pub fn is_registered(&self) -> bool {
        matches!(self.link, Link::Connected { registered: true })
    }

    /// Frames captured but not yet acknowledged by the coordinator.
    pub fn staged_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn busy(&self) -> bool {
        !self.frames.is_empty() || !self.capturing.is_empty() || !self.jobs.is_empty()
    }

    /// Boots the agent; the first connection attempt happens after `first_attempt_in`.
    pub fn start(&mut self, now: Timestamp, first_attempt_in: Duration) {
        self.log(AgentEvent::Booted);
        self.timers.insert(Timer::Reconnect, now + first_attempt_in);
    }

    /// Boots and waits one reconnect interval before the first attempt.
    pub fn start_delayed(&mut self, now: Timestamp) {
        let delay = next_reconnect_delay(self.attempt, &self.cfg, &mut self.rng);
        self.start(now, delay);
    }

    pub fn poll_output(&mut self) -> Option<AgentOutput> {
        self.outbox.pop_front()
    }

    pub fn poll_timeout(&self) -> Option<Timestamp> {
        self.timers.values().min().copied()
    }

    pub fn handle_timeout(&mut self, now: Timestamp) {
        loop {
            let due = self.timers.iter().find(|(_, at)| **at <= now).map(|(t, _)| *t);
            let Some(timer) = due else { break };
            self.timers.remove(&timer);
            match timer {
                Timer::Reconnect => self.attempt_connect(),
                Timer::Heartbeat => self.heartbeat(now),
                Timer::Sd => self.sd_done(now),
            }
        }
    }

    fn log(&mut self, ev: AgentEvent) {
        self.outbox.push_back(AgentOutput::Log(ev));
    }

    fn send(&mut self, body: Body) {
        if self.is_connected() {
            self.outbox.push_back(AgentOutput::Send(Message::new(body)));
        }
    }

    fn attempt_connect(&mut self) {
        if self.link != Link::Down {
            return;
        }
        self.link = Link::Connecting;
        self.log(AgentEvent::ConnectAttempt { attempt: self.attempt });
        self.attempt += 1;
        self.outbox.push_back(AgentOutput::Connect);
    }

    fn schedule_reconnect(&mut self, now: Timestamp) {
        let delay = next_reconnect_delay(self.attempt, &self.cfg, &mut self.rng);
        self.timers.insert(Timer::Reconnect, now + delay);
    }

    pub fn on_connected(&mut self, _now: Timestamp) {
        if self.link != Link::Connecting {
            return;
        }
        self.link = Link::Connected { registered: false };
        self.attempt = 0;
        self.hb_seq = 0;
        self.timers.remove(&Timer::Reconnect);
        self.log(AgentEvent::Connected);
        let hello = Hello { node_id: self.cfg.node_id.clone(), beam: self.cfg.beam, slot: self.cfg.slot };
        self.send(Body::Hello(hello));
    }

    pub fn on_connect_failed(&mut self, now: Timestamp) {
        if self.link != Link::Connecting {
            return;
        }
        self.link = Link::Down;
        self.log(AgentEvent::ConnectFailed);
        self.schedule_reconnect(now);
    }

    pub fn on_disconnected(&mut self, now: Timestamp) {
        if self.link == Link::Down {
            return;
        }
        self.link = Link::Down;
        self.timers.remove(&Timer::Heartbeat);
        self.log(AgentEvent::Disconnected);
        self.requeue_unacknowledged();
        self.schedule_reconnect(now);
    }

    /// Everything sent but not receipted goes back to the front of the queue,
    /// to be re-sent from its header.
    fn requeue_unacknowledged(&mut self) {
        self.upload = None;
        self.frame_msg_in_flight = false;
        let mut resend: Vec<FrameKey> = self
            .frames
            .iter()
            .filter(|(_, f)| matches!(f.stage, Stage::Sending | Stage::AwaitingReceipt))
            .map(|(k, _)| k.clone())
            .collect();
        resend.sort();
        for key in resend.iter().rev() {
            if let Some(f) = self.frames.get_mut(key) {
                f.stage = Stage::Ready;
            }
            self.send_queue.retain(|k| k != key);
            self.send_queue.push_front(key.clone());
        }
    }

    /// The driver finished writing everything queued on the connection.
    pub fn on_flushed(&mut self, _now: Timestamp) {
        self.frame_msg_in_flight = false;
        self.pump_upload();
    }

    pub fn on_message(&mut self, now: Timestamp, msg: Message) {
        match msg.body {
            Body::HelloAck(_) => {
                if let Link::Connected { registered: false } = self.link {
                    self.link = Link::Connected { registered: true };
                    self.log(AgentEvent::Registered);
                    self.timers.insert(Timer::Heartbeat, now);
                    self.pump_upload();
                }
            }
            Body::LightCommand(cmd) => {
                let failure = match self.lights.as_mut() {
                    Some(c) if c.level() == Some(cmd.level) => None,
                    Some(c) => c.apply(cmd.level).err().map(|e| AckFailure::ControllerUnreachable(e.controller)),
                    None => None,
                };
                self.log(AgentEvent::LightsApplied { level: cmd.level, ok: failure.is_none() });
                self.ack(cmd.session_id, AckStep::Lights, failure);
            }
            Body::PatternCommand(cmd) => {
                let failure = match self.projector.as_mut() {
                    Some(p) => match generate_pattern(&cmd.pattern) {
                        Ok(img) => p.show(&cmd.pattern, &img).err().map(|e| AckFailure::ProjectorFailure(e.0)),
                        Err(e) => Some(AckFailure::ProjectorFailure(e.to_string())),
                    },
                    None => None,
                };
                self.log(AgentEvent::PatternShown { kind: cmd.pattern.kind, ok: failure.is_none() });
                self.ack(cmd.session_id, AckStep::Projection, failure);
            }
            Body::CaptureCommand(cmd) => {
                let key = FrameKey {
                    session_id: cmd.session_id.clone(),
                    node_id: self.cfg.node_id.clone(),
                    phase: cmd.phase,
                };
                if self.capturing.contains(&key) || self.frames.contains_key(&key) {
                    return;
                }
                self.capturing.insert(key.clone());
                self.log(AgentEvent::CaptureStarted { key });
                self.outbox.push_back(AgentOutput::Capture { command: cmd, received_at: now });
            }
            Body::FrameComplete(receipt) => {
                if let Some(frame) = self.frames.remove(&receipt.key) {
                    let verified = receipt.checksum == frame.meta.checksum;
                    self.send_queue.retain(|k| k != &receipt.key);
                    if self.upload.as_ref().is_some_and(|u| u.key == receipt.key) {
                        self.upload = None;
                    }
                    self.log(AgentEvent::TransferReceipt(TransferReceipt {
                        key: receipt.key,
                        bytes: frame.meta.byte_size,
                        attempts: frame.attempts,
                        checksum_verified: verified,
                    }));
                    self.pump_upload();
                }
            }
            Body::Error(err) => self.on_error(err),
            // a repeated job id is a redelivery and runs only once
            Body::FleetCommand(cmd) if self.jobs.insert(cmd.job_id) => {
                self.log(AgentEvent::FleetExecStart { job_id: cmd.job_id });
                self.outbox.push_back(AgentOutput::Execute {
                    job_id: cmd.job_id,
                    command: cmd.command,
                    timeout: Duration::from_millis(cmd.timeout_ms),
                });
            }
            // Coordinator-bound kinds are ignored.
            _ => {}
        }
    }

    fn on_error(&mut self, err: ErrorMessage) {
        let Some(key) = err.frame.clone() else {
            self.log(AgentEvent::Rejected { code: err.code, message: err.message });
            return;
        };
        let Some(frame) = self.frames.get_mut(&key) else { return };
        if err.code == ErrorCode::ChecksumMismatch && frame.checksum_retries_left > 0 {
            frame.checksum_retries_left -= 1;
            frame.stage = Stage::Ready;
            if self.upload.as_ref().is_some_and(|u| u.key == key) {
                self.upload = None;
            }
            self.send_queue.retain(|k| k != &key);
            self.send_queue.push_front(key);
            self.pump_upload();
            return;
        }
        self.frames.remove(&key);
        self.send_queue.retain(|k| k != &key);
        if self.upload.as_ref().is_some_and(|u| u.key == key) {
            self.upload = None;
        }
        if err.code == ErrorCode::ChecksumMismatch {
            self.send(Body::Error(ErrorMessage {
                code: ErrorCode::TransferFailed,
                message: "checksum rejected twice; frame dropped".into(),
                frame: Some(key.clone()),
            }));
        }
        self.log(AgentEvent::FrameDropped { key, reason: format!("{:?}: {}", err.code, err.message) });
        self.pump_upload();
    }

    fn ack(&mut self, session_id: Option<SessionId>, step: AckStep, failure: Option<AckFailure>) {
        let node_id = self.cfg.node_id.clone();
        self.send(Body::CaptureAck(CaptureAck { session_id, node_id, step, failure }));
    }

    /// Result of an `AgentOutput::Capture` request.
    pub fn on_capture_finished(
        &mut self,
        _now: Timestamp,
        command: &CaptureCommand,
        result: Result<(FrameMetadata, Vec<u8>), CaptureError>,
    ) {
        let key = FrameKey {
            session_id: command.session_id.clone(),
            node_id: self.cfg.node_id.clone(),
            phase: command.phase,
        };
        if !self.capturing.remove(&key) {
            return;
        }
        let step = AckStep::Capture(command.phase);
        match result {
            Ok((meta, bytes)) => {
                self.ack(Some(command.session_id.clone()), step, None);
                self.frames.insert(
                    key.clone(),
                    StagedFrame { meta, bytes, stage: Stage::Writing, attempts: 0, checksum_retries_left: 1 },
                );
                self.sd_queue.push_back((key, SdOp::Write));
                self.sd_kick(_now);
            }
            Err(e) => {
                let failure = AckFailure::from(&e);
                self.log(AgentEvent::CaptureFailed { key, failure: failure.clone() });
                self.ack(Some(command.session_id.clone()), step, Some(failure));
            }
        }
    }

    fn sd_kick(&mut self, now: Timestamp) {
        if self.sd_busy.is_some() {
            return;
        }
        while let Some((key, op)) = self.sd_queue.pop_front() {
            let Some(frame) = self.frames.get_mut(&key) else { continue };
            let rate = match op {
                SdOp::Write => self.cfg.staging_write_rate,
                SdOp::Read => {
                    frame.stage = Stage::Reading;
                    self.cfg.staging_read_rate
                }
            };
            let d = Duration::from_secs_f64(frame.meta.byte_size as f64 / rate);
            self.sd_busy = Some((key, op));
            self.timers.insert(Timer::Sd, now + d);
            return;
        }
    }

    fn sd_done(&mut self, now: Timestamp) {
        if let Some((key, op)) = self.sd_busy.take() {
            if let Some(frame) = self.frames.get_mut(&key) {
                match op {
                    SdOp::Write => {
                        frame.stage = Stage::Staged;
                        let bytes = frame.meta.byte_size;
                        self.log(AgentEvent::FrameStaged { key: key.clone(), bytes });
                        self.sd_queue.push_back((key, SdOp::Read));
                    }
                    SdOp::Read => {
                        frame.stage = Stage::Ready;
                        self.send_queue.push_back(key);
                        self.pump_upload();
                    }
                }
            }
        }
        self.sd_kick(now);
    }

    /// Emits the next frame message if the connection has room.
    fn pump_upload(&mut self) {
        if !self.is_registered() || self.frame_msg_in_flight {
            return;
        }
        loop {
            if self.upload.is_none() {
                let Some(key) = self.send_queue.pop_front() else { return };
                let Some(frame) = self.frames.get_mut(&key) else { continue };
                if frame.stage != Stage::Ready {
                    continue;
                }
                frame.stage = Stage::Sending;
                frame.attempts += 1;
                let attempt = frame.attempts;
                let chunks = frame.bytes.len().div_ceil(MAX_CHUNK_LEN);
                self.upload = Some(Upload { key: key.clone(), next: 0, chunks });
                self.log(AgentEvent::TransferStarted { key, attempt });
            }
            let upload = self.upload.as_mut().expect("set above");
            let Some(frame) = self.frames.get_mut(&upload.key) else {
                self.upload = None;
                continue;
            };
            let body = if upload.next == 0 {
                Body::FrameHeader(FrameHeader { frame: frame.meta.clone(), chunk_count: upload.chunks as u32 })
            } else if upload.next <= upload.chunks {
                let i = upload.next - 1;
                let end = ((i + 1) * MAX_CHUNK_LEN).min(frame.bytes.len());
                Body::FrameChunk(FrameChunk {
                    key: upload.key.clone(),
                    index: i as u32,
                    data: frame.bytes[i * MAX_CHUNK_LEN..end].to_vec(),
                })
            } else {
                frame.stage = Stage::AwaitingReceipt;
                let body = Body::FrameComplete(FrameComplete {
                    key: upload.key.clone(),
                    checksum: frame.meta.checksum.clone(),
                });
                self.upload = None;
                self.frame_msg_in_flight = true;
                self.send(body);
                return;
            };
            upload.next += 1;
            self.frame_msg_in_flight = true;
            self.send(body);
            return;
        }
    }

    fn heartbeat(&mut self, now: Timestamp) {
        if !self.is_registered() {
            return;
        }
        let seq = self.hb_seq;
        self.hb_seq += 1;
        self.send(Body::Heartbeat(Heartbeat { node_id: self.cfg.node_id.clone(), seq }));
        self.timers.insert(Timer::Heartbeat, now + self.cfg.heartbeat_period);
    }

    /// Result of an `AgentOutput::Execute` request.
    pub fn on_command_finished(&mut self, _now: Timestamp, job_id: u64, run: CommandRun) {
        if !self.jobs.remove(&job_id) {
            return;
        }
        self.log(AgentEvent::FleetExecEnd { job_id, outcome: run.outcome.clone() });
        self.send(Body::FleetResult(FleetResult {
            job_id,
            node_id: self.cfg.node_id.clone(),
            outcome: run.outcome,
            duration_ms: run.elapsed.as_millis() as u64,
        }));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lighting::PatternSpec;
    use crate::protocol::HelloAck;

    fn cmd(phase: Phase) -> CaptureCommand {
        CaptureCommand {
            session_id: "s0001".into(),
            phase,
            pattern_ref: (phase == Phase::Pattern).then(|| PatternSpec::random_dot(7, 0.5, 64, 40)),
            exposure_deadline: 2_000,
        }
    }

    fn small_cfg() -> AgentConfig {
        AgentConfig { frame_width: 32, frame_height: 24, ..AgentConfig::default() }
    }

    fn drain(agent: &mut Agent) -> Vec<AgentOutput> {
        std::iter::from_fn(|| agent.poll_output()).collect()
    }

    fn sent(outputs: &[AgentOutput]) -> Vec<&Body> {
        outputs
            .iter()
            .filter_map(|o| match o {
                AgentOutput::Send(m) => Some(&m.body),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn zero_jitter_is_exactly_base() {
        let cfg = AgentConfig { jitter_fraction: 0.0, ..AgentConfig::default() };
        let mut rng = SplitMix64::new(5);
        for attempt in 0..10 {
            assert_eq!(next_reconnect_delay(attempt, &cfg, &mut rng), Duration::from_secs(2));
        }
    }

    #[test]
    fn jitter_stays_within_ten_percent() {
        let cfg = AgentConfig::default();
        let mut rng = SplitMix64::new(99);
        for attempt in 0..1000 {
            let d = next_reconnect_delay(attempt, &cfg, &mut rng).as_secs_f64();
            assert!((1.8..=2.2).contains(&d), "{d}");
        }
    }

    #[test]
    fn seed_42_delay_sequence() {
        // Reference: 2·(1 + (2u − 1)·0.1) with u from an independent SplitMix64.
        let golden = [2.096625951508729, 1.8639641571507681, 1.9114404521020554, 1.937676286609455, 1.8152120674160985];
        let cfg = AgentConfig { rng_seed: 42, ..AgentConfig::default() };
        let mut rng = SplitMix64::new(cfg.rng_seed);
        for (attempt, want) in golden.iter().enumerate() {
            let got = next_reconnect_delay(attempt as u32, &cfg, &mut rng).as_secs_f64();
            assert!((got - want).abs() < 1e-9, "attempt {attempt}: {got} vs {want}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(AgentConfig::default().validate().is_ok());
        assert!(AgentConfig { jitter_fraction: 1.0, ..AgentConfig::default() }.validate().is_err());
        assert!(AgentConfig { reconnect_base: Duration::ZERO, ..AgentConfig::default() }.validate().is_err());
        assert!(AgentConfig { staging_read_rate: 0.0, ..AgentConfig::default() }.validate().is_err());
    }

    #[test]
    fn mock_capture_is_deterministic() {
        let mut cam = MockCamera::default();
        let node = NodeId::new("n07");
        let (m1, b1) = capture_frame(&mut cam, &node, (32, 24), &cmd(Phase::Texture), Timestamp::ZERO).unwrap();
        let (m2, b2) = capture_frame(&mut cam, &node, (32, 24), &cmd(Phase::Texture), Timestamp::ZERO).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(m1.checksum, m2.checksum);
        assert!(b1.starts_with(b"P6\n32 24\n255\n"));
        assert_eq!(b1.len(), 13 + 32 * 24 * 3);
        assert_eq!(m1.captured_at, Timestamp::ZERO + cam.exposure);
        let (m3, _) = capture_frame(&mut cam, &node, (32, 24), &cmd(Phase::Pattern), Timestamp::ZERO).unwrap();
        assert_ne!(m1.checksum, m3.checksum);
    }

    #[test]
    fn frame_checksums_distinct_across_96_nodes() {
        let mut cam = MockCamera::default();
        let mut seen = BTreeSet::new();
        for i in 1..=96 {
            let node = NodeId::new(format!("n{i:02}"));
            for phase in Phase::BOTH {
                let (m, _) = capture_frame(&mut cam, &node, (16, 16), &cmd(phase), Timestamp::ZERO).unwrap();
                assert!(seen.insert(m.checksum), "collision at {node}/{phase}");
            }
        }
    }

    #[test]
    fn backend_failure_and_deadline() {
        let mut cam = MockCamera { fail: true, ..MockCamera::default() };
        let node = NodeId::new("n01");
        assert!(matches!(
            capture_frame(&mut cam, &node, (8, 8), &cmd(Phase::Texture), Timestamp::ZERO),
            Err(CaptureError::BackendFailure(_))
        ));
        let mut slow = MockCamera { exposure: Duration::from_secs(3), ..MockCamera::default() };
        assert!(matches!(
            capture_frame(&mut slow, &node, (8, 8), &cmd(Phase::Texture), Timestamp::ZERO),
            Err(CaptureError::DeadlineExceeded { .. })
        ));
    }

    #[test]
    fn transfer_plan_arithmetic() {
        let bytes = vec![1u8; 3_000_000];
        let meta = FrameMetadata {
            node_id: "n01".into(),
            session_id: "s".into(),
            phase: Phase::Texture,
            width: 1000,
            height: 1000,
            byte_size: bytes.len() as u64,
            checksum: sha256_hex(&bytes),
            captured_at: Timestamp::ZERO,
        };
        let plan = plan_transfer(&meta, &bytes, &AgentConfig::default(), 125e6).unwrap();
        // 3e6/10e6 + 3e6/20e6 + 3e6/125e6
        let expected = 0.3 + 0.15 + 0.024;
        assert!((plan.total().as_secs_f64() - expected).abs() < 1e-9);
        assert_eq!(plan.messages, 46 + 2);

        let empty = FrameMetadata { byte_size: 0, ..meta.clone() };
        assert_eq!(plan_transfer(&empty, &[], &AgentConfig::default(), 125e6), Err(TransferError::InvalidFrame));
        let tampered = FrameMetadata { checksum: "00".into(), ..meta };
        assert_eq!(
            plan_transfer(&tampered, &bytes, &AgentConfig::default(), 125e6),
            Err(TransferError::ChecksumMismatch)
        );
    }

    fn registered_agent() -> Agent {
        let mut a = Agent::new(small_cfg()).unwrap();
        a.start(Timestamp::ZERO, Duration::ZERO);
        a.handle_timeout(Timestamp::ZERO);
        a.on_connected(Timestamp::ZERO);
        a.on_message(
            Timestamp::ZERO,
            Message::new(Body::HelloAck(HelloAck { node_id: "n01".into(), heartbeat_period_ms: 1000 })),
        );
        drain(&mut a);
        a
    }

    #[test]
    fn connect_registers_and_heartbeats_increase() {
        let mut a = Agent::new(small_cfg()).unwrap();
        a.start(Timestamp::ZERO, Duration::ZERO);
        a.handle_timeout(Timestamp::ZERO);
        assert!(drain(&mut a).contains(&AgentOutput::Connect));
        a.on_connected(Timestamp::ZERO);
        let out = drain(&mut a);
        assert!(matches!(sent(&out)[..], [Body::Hello(_)]));
        a.on_message(
            Timestamp::ZERO,
            Message::new(Body::HelloAck(HelloAck { node_id: "n01".into(), heartbeat_period_ms: 1000 })),
        );
        let mut seqs = Vec::new();
        for s in 0..4u64 {
            a.handle_timeout(Timestamp::from_micros(s * 1_000_000));
            for b in sent(&drain(&mut a)) {
                if let Body::Heartbeat(h) = b {
                    seqs.push(h.seq);
                }
            }
        }
        assert_eq!(seqs, vec![0, 1, 2, 3]);
        // no reconnect attempts while connected
        assert_eq!(a.poll_timeout(), Some(Timestamp::from_micros(4_000_000)));
    }

    #[test]
    fn failed_connect_retries_at_regular_interval() {
        let mut a = Agent::new(small_cfg()).unwrap();
        a.start(Timestamp::ZERO, Duration::ZERO);
        let mut attempts = Vec::new();
        for _ in 0..5 {
            let now = a.poll_timeout().unwrap();
            a.handle_timeout(now);
            if drain(&mut a).contains(&AgentOutput::Connect) {
                attempts.push(now);
            }
            a.on_connect_failed(now);
            drain(&mut a);
        }
        for w in attempts.windows(2) {
            let gap = w[1].saturating_since(w[0]).as_secs_f64();
            assert!((1.8..=2.2).contains(&gap), "{gap}");
        }
    }

    fn capture_and_stage(a: &mut Agent, phase: Phase, now: Timestamp) -> Timestamp {
        let c = cmd(phase);
        a.on_message(now, Message::new(Body::CaptureCommand(c.clone())));
        let out = drain(a);
        assert!(out.iter().any(|o| matches!(o, AgentOutput::Capture { .. })));
        let mut cam = MockCamera::default();
        let res = capture_frame(&mut cam, a.node_id(), (32, 24), &c, now);
        a.on_capture_finished(now, &c, res);
        let out = drain(a);
        assert!(sent(&out).iter().any(|b| matches!(b, Body::CaptureAck(ack) if ack.is_ok())));
        // run SD write and read
        let mut t = now;
        while let Some(next) = a.poll_timeout() {
            if a.frames
                .values()
                .all(|f| f.stage != Stage::Writing && f.stage != Stage::Reading && f.stage != Stage::Staged)
            {
                break;
            }
            t = next;
            a.handle_timeout(t);
        }
        t
    }

    fn upload_all(a: &mut Agent, now: Timestamp) -> Vec<Message> {
        let mut msgs = Vec::new();
        loop {
            let out = drain(a);
            let mut any = false;
            for o in out {
                if let AgentOutput::Send(m) = o {
                    if matches!(m.body, Body::FrameHeader(_) | Body::FrameChunk(_) | Body::FrameComplete(_)) {
                        any = true;
                        msgs.push(m);
                    }
                }
            }
            if !any {
                break;
            }
            a.on_flushed(now);
        }
        msgs
    }

    #[test]
    fn captured_frame_is_uploaded_in_chunks_and_released_on_receipt() {
        let mut a = registered_agent();
        let t = capture_and_stage(&mut a, Phase::Texture, Timestamp::ZERO);
        let msgs = upload_all(&mut a, t);
        assert!(matches!(msgs.first().unwrap().body, Body::FrameHeader(_)));
        let Body::FrameComplete(done) = &msgs.last().unwrap().body else { panic!() };
        assert_eq!(a.staged_frames(), 1);
        a.on_message(t, Message::new(Body::FrameComplete(done.clone())));
        assert_eq!(a.staged_frames(), 0);
        let out = drain(&mut a);
        assert!(out.iter().any(
            |o| matches!(o, AgentOutput::Log(AgentEvent::TransferReceipt(r)) if r.checksum_verified && r.attempts == 1)
        ));
    }

    #[test]
    fn disconnect_mid_upload_resends_whole_frame() {
        let mut a = registered_agent();
        let t = capture_and_stage(&mut a, Phase::Texture, Timestamp::ZERO);
        // send the header only
        let out = drain(&mut a);
        let frames: Vec<_> = sent(&out).into_iter().filter(|b| !matches!(b, Body::Heartbeat(_))).collect();
        assert!(matches!(frames[..], [Body::FrameHeader(_)]));
        a.on_disconnected(t);
        assert_eq!(a.staged_frames(), 1);
        let next = a.poll_timeout().unwrap();
        a.handle_timeout(next);
        a.on_connected(next);
        a.on_message(next, Message::new(Body::HelloAck(HelloAck { node_id: "n01".into(), heartbeat_period_ms: 1000 })));
        let msgs = upload_all(&mut a, next);
        assert!(matches!(msgs.first().unwrap().body, Body::FrameHeader(_)));
        assert!(matches!(msgs.last().unwrap().body, Body::FrameComplete(_)));
    }

    #[test]
    fn checksum_rejection_retries_once_then_reports() {
        let mut a = registered_agent();
        let t = capture_and_stage(&mut a, Phase::Texture, Timestamp::ZERO);
        let msgs = upload_all(&mut a, t);
        let Body::FrameComplete(done) = &msgs.last().unwrap().body else { panic!() };
        let reject = Message::new(Body::Error(ErrorMessage {
            code: ErrorCode::ChecksumMismatch,
            message: "bad".into(),
            frame: Some(done.key.clone()),
        }));
        a.on_message(t, reject.clone());
        let retry = upload_all(&mut a, t);
        assert!(matches!(retry.first().unwrap().body, Body::FrameHeader(_)));
        a.on_message(t, reject);
        let out = drain(&mut a);
        assert!(sent(&out).iter().any(|b| matches!(b, Body::Error(e) if e.code == ErrorCode::TransferFailed)));
        assert_eq!(a.staged_frames(), 0);
    }

    #[test]
    fn failed_capture_acks_with_failure_and_stages_nothing() {
        let mut a = registered_agent();
        let c = cmd(Phase::Texture);
        a.on_message(Timestamp::ZERO, Message::new(Body::CaptureCommand(c.clone())));
        drain(&mut a);
        let mut cam = MockCamera { fail: true, ..MockCamera::default() };
        let res = capture_frame(&mut cam, a.node_id(), (8, 8), &c, Timestamp::ZERO);
        a.on_capture_finished(Timestamp::ZERO, &c, res);
        let out = drain(&mut a);
        let acks: Vec<_> = sent(&out)
            .into_iter()
            .filter_map(|b| match b {
                Body::CaptureAck(ack) => Some(ack.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(acks.len(), 1);
        assert!(matches!(acks[0].failure, Some(AckFailure::BackendFailure(_))));
        assert_eq!(a.staged_frames(), 0);
    }

    #[test]
    fn light_and_pattern_commands_are_acknowledged() {
        use crate::lighting::{LightLevel, MockLightController, MockProjector};
        use crate::protocol::{LightCommand, PatternCommand};
        let mut a = registered_agent()
            .with_lights(Box::new(MockLightController::new(2)))
            .with_projector(Box::new(MockProjector::default()));
        a.on_message(
            Timestamp::ZERO,
            Message::new(Body::LightCommand(LightCommand { session_id: None, level: LightLevel::Half })),
        );
        a.on_message(
            Timestamp::ZERO,
            Message::new(Body::PatternCommand(PatternCommand {
                session_id: None,
                pattern: PatternSpec::random_dot(7, 0.5, 16, 16),
            })),
        );
        let out = drain(&mut a);
        let steps: Vec<AckStep> = sent(&out)
            .into_iter()
            .filter_map(|b| match b {
                Body::CaptureAck(ack) if ack.is_ok() => Some(ack.step),
                _ => None,
            })
            .collect();
        assert_eq!(steps, vec![AckStep::Lights, AckStep::Projection]);
    }

    #[test]
    fn fleet_command_round_trip() {
        let mut a = registered_agent();
        a.on_message(
            Timestamp::ZERO,
            Message::new(Body::FleetCommand(crate::protocol::FleetCommand {
                job_id: 3,
                command: "echo hi".into(),
                timeout_ms: 1000,
            })),
        );
        let out = drain(&mut a);
        let Some(AgentOutput::Execute { command, timeout, .. }) =
            out.iter().find(|o| matches!(o, AgentOutput::Execute { .. }))
        else {
            panic!("no execute")
        };
        let run = EchoBackend::default().run(command, *timeout);
        a.on_command_finished(Timestamp::ZERO, 3, run);
        let out = drain(&mut a);
        assert!(sent(&out).iter().any(|b| matches!(b,
            Body::FleetResult(r) if r.outcome == FleetOutcome::Exited { code: 0, output: "hi".into() })));
    }

    #[cfg(unix)]
    #[test]
    fn shell_backend_runs_and_times_out() {
        let run = ShellBackend.run("echo fleet", Duration::from_secs(5));
        assert_eq!(run.outcome, FleetOutcome::Exited { code: 0, output: "fleet\n".into() });
        let run = ShellBackend.run("sleep 5", Duration::from_millis(100));
        assert_eq!(run.outcome, FleetOutcome::TimedOut);
    }

    #[cfg(unix)]
    #[test]
    fn command_camera_reads_program_output() {
        let dir = tempfile::tempdir().unwrap();
        let mut cam = CommandCamera {
            program: "sh".into(),
            args: vec!["-c".into(), "printf 'P6 {width} {height}' > {output}".into()],
            scratch_dir: dir.path().to_path_buf(),
        };
        let c = cmd(Phase::Texture);
        let (meta, bytes) = capture_frame(&mut cam, &NodeId::new("n01"), (4, 3), &c, Timestamp::ZERO).unwrap();
        assert_eq!(bytes, b"P6 4 3");
        assert_eq!(meta.byte_size, 6);
    }
}
