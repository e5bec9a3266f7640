use super::*;
use crate::fleet::NodeSelector;
use crate::protocol::{
    frame_messages, sha256_hex, CaptureAck, FleetOutcome, FleetResult, FrameMetadata, Heartbeat, Hello,
};

struct Harness {
    coord: Coordinator,
    _dir: tempfile::TempDir,
    now: Timestamp,
}

impl Harness {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = CaptureStore::open(dir.path()).unwrap();
        Self { coord: Coordinator::new(CoordinatorConfig::default(), store), _dir: dir, now: Timestamp::ZERO }
    }

    fn drain(&mut self) -> Vec<CoordOutput> {
        std::iter::from_fn(|| self.coord.poll_output()).collect()
    }

    fn msg(&mut self, conn: ConnId, body: Body) -> Vec<CoordOutput> {
        self.coord.on_message(self.now, conn, Message::new(body));
        self.drain()
    }

    fn register(&mut self, conn: ConnId, id: &str, beam: u32, slot: u32) -> Vec<CoordOutput> {
        self.msg(conn, Body::Hello(Hello { node_id: id.into(), beam, slot }))
    }

    fn ack(&mut self, conn: ConnId, id: &str, session: &SessionId, step: AckStep) {
        self.msg(
            conn,
            Body::CaptureAck(CaptureAck { session_id: Some(session.clone()), node_id: id.into(), step, failure: None }),
        );
    }

    fn deliver(&mut self, conn: ConnId, meta: &FrameMetadata, bytes: &[u8]) -> Vec<CoordOutput> {
        let mut out = Vec::new();
        for m in frame_messages(meta, bytes) {
            self.coord.on_message(self.now, conn, m);
            out.extend(self.drain());
        }
        out
    }
}

fn sent_bodies(out: &[CoordOutput]) -> Vec<(ConnId, &Body)> {
    out.iter()
        .filter_map(|o| match o {
            CoordOutput::Send { conn, msg } => Some((*conn, &msg.body)),
            _ => None,
        })
        .collect()
}

fn frame(session: &SessionId, node: &str, phase: Phase) -> (FrameMetadata, Vec<u8>) {
    let bytes = format!("P6\n2 2\n255\n{node}{phase}").into_bytes();
    let meta = FrameMetadata {
        node_id: node.into(),
        session_id: session.clone(),
        phase,
        width: 2,
        height: 2,
        byte_size: bytes.len() as u64,
        checksum: sha256_hex(&bytes),
        captured_at: Timestamp::ZERO,
    };
    (meta, bytes)
}

/// Registers n01 (conn 1) and n02 (conn 2) and runs a session up to the
/// point where both frames of both phases can be delivered.
fn session_in_flight(h: &mut Harness) -> SessionId {
    h.register(1, "n01", 0, 0);
    h.register(2, "n02", 0, 1);
    let view = h.coord.start_session(h.now, StartSession::default()).unwrap();
    let id = view.session_id;
    for (conn, node) in [(1, "n01"), (2, "n02")] {
        h.ack(conn, node, &id, AckStep::Lights);
    }
    for (conn, node) in [(1, "n01"), (2, "n02")] {
        h.ack(conn, node, &id, AckStep::Projection);
        h.ack(conn, node, &id, AckStep::Capture(Phase::Texture));
    }
    for (conn, node) in [(1, "n01"), (2, "n02")] {
        h.ack(conn, node, &id, AckStep::Projection);
    }
    for (conn, node) in [(1, "n01"), (2, "n02")] {
        h.ack(conn, node, &id, AckStep::Capture(Phase::Pattern));
    }
    h.drain();
    assert_eq!(h.coord.session(&id).unwrap().state, SessionState::Transferring);
    id
}

#[test]
fn hello_is_acknowledged_and_recorded() {
    let mut h = Harness::new();
    let out = h.register(7, "n01", 0, 0);
    assert!(matches!(sent_bodies(&out)[..], [(7, Body::HelloAck(_))]));
    assert_eq!(h.coord.nodes().connected(), 1);
}

#[test]
fn slot_conflict_is_rejected_and_closed() {
    let mut h = Harness::new();
    h.register(1, "n01", 0, 0);
    let out = h.register(2, "n02", 0, 0);
    assert!(sent_bodies(&out)
        .iter()
        .any(|(c, b)| *c == 2 && matches!(b, Body::Error(e) if e.code == ErrorCode::SlotConflict)));
    assert!(out.contains(&CoordOutput::Close { conn: 2 }));
    assert_eq!(h.coord.nodes().nodes.len(), 1);
}

#[test]
fn messages_before_hello_are_refused() {
    let mut h = Harness::new();
    let out = h.msg(3, Body::Heartbeat(Heartbeat { node_id: "n01".into(), seq: 0 }));
    assert!(matches!(sent_bodies(&out)[..], [(3, Body::Error(e))] if e.code == ErrorCode::NotRegistered));
}

#[test]
fn silent_node_is_lost_after_three_seconds() {
    let mut h = Harness::new();
    h.register(1, "n01", 0, 0);
    assert_eq!(h.coord.poll_timeout(), Some(Timestamp::from_secs_f64(3.0)));
    h.now = Timestamp::from_secs_f64(2.5);
    h.msg(1, Body::Heartbeat(Heartbeat { node_id: "n01".into(), seq: 0 }));
    h.coord.handle_timeout(Timestamp::from_secs_f64(3.0));
    assert_eq!(h.coord.nodes().connected(), 1);
    h.coord.handle_timeout(Timestamp::from_secs_f64(5.5));
    let out = h.drain();
    assert_eq!(h.coord.nodes().nodes[0].state, NodeState::Lost);
    assert!(out.contains(&CoordOutput::Close { conn: 1 }));
}

#[test]
fn zero_node_session_completes_immediately() {
    let mut h = Harness::new();
    let view = h.coord.start_session(h.now, StartSession::default()).unwrap();
    assert_eq!(view.state, SessionState::Complete);
    let report = view.report.unwrap();
    assert_eq!(report.frames_expected, 0);
    assert!(report.missing.is_empty());
    assert_eq!(view.session_id, SessionId::new("s0001"));
    let second = h.coord.start_session(h.now, StartSession::default()).unwrap();
    assert_eq!(second.session_id, SessionId::new("s0002"));
}

#[test]
fn commands_follow_the_capture_sequence() {
    let mut h = Harness::new();
    h.register(1, "n01", 0, 0);
    h.coord.start_session(h.now, StartSession::default()).unwrap();
    let out = h.drain();
    let kinds: Vec<&str> = sent_bodies(&out).iter().map(|(_, b)| b.kind()).collect();
    assert_eq!(kinds, ["LightCommand"]);
    h.ack(1, "n01", &"s0001".into(), AckStep::Lights);
    // the ack emitted a black projection and the texture capture
    let id: SessionId = "s0001".into();
    assert_eq!(h.coord.session(&id).unwrap().state, SessionState::TextureCapture);
}

#[test]
fn valid_frame_is_stored_and_receipted() {
    let mut h = Harness::new();
    let id = session_in_flight(&mut h);
    let (meta, bytes) = frame(&id, "n01", Phase::Texture);
    let out = h.deliver(1, &meta, &bytes);
    assert!(sent_bodies(&out)
        .iter()
        .any(|(c, b)| *c == 1 && matches!(b, Body::FrameComplete(r) if r.checksum == meta.checksum)));
    let path = h.coord.store().session_dir(&id).join("texture/n01.ppm");
    assert_eq!(std::fs::read(path).unwrap(), bytes);
    let manifest = h.coord.store().read_manifest(&id).unwrap();
    assert_eq!(manifest.frames.len(), 1);
    assert_eq!(h.coord.session(&id).unwrap().frames_received, 1);
}

#[test]
fn duplicate_frame_is_acknowledged_not_rewritten() {
    let mut h = Harness::new();
    let id = session_in_flight(&mut h);
    let (meta, bytes) = frame(&id, "n01", Phase::Texture);
    h.deliver(1, &meta, &bytes);
    let out = h.deliver(1, &meta, &bytes);
    assert!(sent_bodies(&out).iter().any(|(_, b)| matches!(b, Body::FrameComplete(_))));
    let manifest = h.coord.store().read_manifest(&id).unwrap();
    assert_eq!(manifest.frames.len(), 1);
    assert_eq!(h.coord.nodes().nodes[0].frames_delivered, 1);
}

#[test]
fn checksum_mismatch_is_rejected_without_a_row() {
    let mut h = Harness::new();
    let id = session_in_flight(&mut h);
    let (mut meta, bytes) = frame(&id, "n01", Phase::Texture);
    meta.checksum = sha256_hex(b"something else");
    let out = h.deliver(1, &meta, &bytes);
    assert!(sent_bodies(&out)
        .iter()
        .any(|(_, b)| matches!(b, Body::Error(e) if e.code == ErrorCode::ChecksumMismatch && e.frame.is_some())));
    assert!(h.coord.store().read_manifest(&id).unwrap().frames.is_empty());
}

#[test]
fn frames_from_strangers_and_early_phases_are_rejected() {
    let mut h = Harness::new();
    h.register(1, "n01", 0, 0);
    h.register(2, "n02", 0, 1);
    let id = h.coord.start_session(h.now, StartSession::default()).unwrap().session_id;
    h.register(3, "n03", 0, 2);
    h.drain();
    let (meta, bytes) = frame(&id, "n03", Phase::Texture);
    let out = h.deliver(3, &meta, &bytes);
    assert!(sent_bodies(&out).iter().any(|(_, b)| matches!(b, Body::Error(e) if e.code == ErrorCode::UnknownNode)));
    let (meta, bytes) = frame(&id, "n01", Phase::Pattern);
    let out = h.deliver(1, &meta, &bytes);
    assert!(sent_bodies(&out).iter().any(|(_, b)| matches!(b, Body::Error(e) if e.code == ErrorCode::PhaseMismatch)));
    let (meta, bytes) = frame(&"s0099".into(), "n01", Phase::Texture);
    let out = h.deliver(1, &meta, &bytes);
    assert!(sent_bodies(&out).iter().any(|(_, b)| matches!(b, Body::Error(e) if e.code == ErrorCode::UnknownSession)));
}

#[test]
fn all_frames_complete_the_session_with_a_sound_manifest() {
    let mut h = Harness::new();
    let id = session_in_flight(&mut h);
    for (conn, node) in [(1, "n01"), (2, "n02")] {
        for phase in Phase::BOTH {
            let (meta, bytes) = frame(&id, node, phase);
            h.deliver(conn, &meta, &bytes);
        }
    }
    let view = h.coord.session(&id).unwrap();
    assert_eq!(view.state, SessionState::Complete);
    let report = view.report.unwrap();
    assert_eq!(report.frames_received, 4);
    assert!(report.missing.is_empty());
    let verify = verify_manifest(&h.coord.store().session_dir(&id)).unwrap();
    assert!(verify.is_sound());
    assert_eq!(verify.ok, 4);
}

#[test]
fn transfer_deadline_ends_session_with_missing_frames() {
    let mut h = Harness::new();
    let id = session_in_flight(&mut h);
    let (meta, bytes) = frame(&id, "n01", Phase::Texture);
    h.deliver(1, &meta, &bytes);
    for conn in [1, 2] {
        let node = if conn == 1 { "n01" } else { "n02" };
        h.now = Timestamp::from_secs_f64(29.0);
        h.msg(conn, Body::Heartbeat(Heartbeat { node_id: node.into(), seq: 1 }));
    }
    h.coord.handle_timeout(Timestamp::from_secs_f64(30.0));
    let view = h.coord.session(&id).unwrap();
    assert_eq!(view.state, SessionState::PartialFailure);
    assert_eq!(view.report.unwrap().missing.len(), 3);
    // the session is closed to late frames
    h.now = Timestamp::from_secs_f64(30.5);
    let (meta, bytes) = frame(&id, "n02", Phase::Texture);
    let out = h.deliver(2, &meta, &bytes);
    assert!(sent_bodies(&out).iter().any(|(_, b)| matches!(b, Body::Error(e) if e.code == ErrorCode::SessionClosed)));
}

#[test]
fn second_session_rejected_while_running() {
    let mut h = Harness::new();
    h.register(1, "n01", 0, 0);
    h.coord.start_session(h.now, StartSession::default()).unwrap();
    let err = h.coord.start_session(h.now, StartSession::default()).unwrap_err();
    assert_eq!(err.kind, ApiErrorKind::Conflict);
}

#[test]
fn fleet_rejected_during_session_and_runs_after() {
    let mut h = Harness::new();
    h.register(1, "n01", 0, 0);
    h.coord.start_session(h.now, StartSession::default()).unwrap();
    let job = FleetJob::new(NodeSelector::All, "uptime");
    assert_eq!(h.coord.start_fleet(h.now, job.clone()).unwrap_err().kind, ApiErrorKind::Conflict);

    let mut h = Harness::new();
    h.register(1, "n01", 0, 0);
    h.register(2, "n02", 0, 1);
    h.drain();
    let report = h.coord.start_fleet(h.now, job).unwrap();
    assert!(!report.done);
    let out = h.drain();
    assert_eq!(sent_bodies(&out).iter().filter(|(_, b)| matches!(b, Body::FleetCommand(_))).count(), 2);
    for (conn, node) in [(1, "n01"), (2, "n02")] {
        h.msg(
            conn,
            Body::FleetResult(FleetResult {
                job_id: report.job_id,
                node_id: node.into(),
                outcome: FleetOutcome::Exited { code: 0, output: "up".into() },
                duration_ms: 5,
            }),
        );
    }
    let done = h.coord.fleet_job(report.job_id).unwrap();
    assert!(done.done);
    assert_eq!(done.rows.len(), 2);
    assert_eq!(done.failures(), 0);
}

#[test]
fn empty_fleet_selection_is_an_error() {
    let mut h = Harness::new();
    let err = h.coord.start_fleet(h.now, FleetJob::new(NodeSelector::All, "uptime")).unwrap_err();
    assert_eq!(err.kind, ApiErrorKind::EmptySelection);
}

#[test]
fn light_override_reaches_every_connected_node() {
    let mut h = Harness::new();
    h.register(1, "n01", 0, 0);
    h.register(2, "n02", 0, 1);
    h.drain();
    let resp = h.coord.set_lights(h.now, LightLevel::Half);
    assert_eq!(resp.targets, 2);
    let out = h.drain();
    assert_eq!(sent_bodies(&out).iter().filter(|(_, b)| matches!(b, Body::LightCommand(_))).count(), 2);
    let resp = h.coord.set_pattern(h.now, PatternSpec::random_dot(7, 0.5, 8, 8)).unwrap();
    assert_eq!(resp.targets, 2);
}

#[test]
fn per_projector_seeds_offset_each_beam() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CoordinatorConfig { per_projector_seeds: true, ..CoordinatorConfig::default() };
    let mut h = Harness {
        coord: Coordinator::new(cfg, CaptureStore::open(dir.path()).unwrap()),
        _dir: dir,
        now: Timestamp::ZERO,
    };
    h.register(1, "n01", 0, 0);
    h.register(2, "n05", 1, 0);
    h.drain();
    let base = PatternSpec::random_dot(40, 0.5, 8, 8);
    h.coord.set_pattern(h.now, base).unwrap();
    let out = h.drain();
    let seeds: Vec<(ConnId, u64)> = sent_bodies(&out)
        .into_iter()
        .filter_map(|(c, b)| match b {
            Body::PatternCommand(p) => Some((c, p.pattern.seed)),
            _ => None,
        })
        .collect();
    assert_eq!(seeds, [(1, 40), (2, 41)]);

    let shared = base.for_beam(7, false);
    assert_eq!(shared, base);
}
