//! The two-phase capture session as a pure transition function.
//!
//! [`session_step`] never touches the clock, the network or the disk. It
//! returns the successor session plus the [`SessionEffect`]s the caller must
//! carry out (command fan-outs and deadline timers).

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lighting::{LightLevel, PatternSpec};
use crate::protocol::{NodeId, Phase, SessionId};
use crate::time::duration_ms;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Idle,
    LightsSet,
    TextureCapture,
    PatternProject,
    PatternCapture,
    Transferring,
    Complete,
    PartialFailure,
}

impl SessionState {
    /// Position in the forward order. Both terminal states share the last index.
    pub fn index(self) -> u8 {
        match self {
            SessionState::Idle => 0,
            SessionState::LightsSet => 1,
            SessionState::TextureCapture => 2,
            SessionState::PatternProject => 3,
            SessionState::PatternCapture => 4,
            SessionState::Transferring => 5,
            SessionState::Complete | SessionState::PartialFailure => 6,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Complete | SessionState::PartialFailure)
    }

    /// States that wait for one acknowledgement from every live node.
    pub fn awaits_acks(self) -> bool {
        matches!(
            self,
            SessionState::LightsSet
                | SessionState::TextureCapture
                | SessionState::PatternProject
                | SessionState::PatternCapture
        )
    }

    fn accepts_frames(self) -> bool {
        (SessionState::TextureCapture.index()..=SessionState::Transferring.index()).contains(&self.index())
    }
}

impl std::fmt::Display for SessionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deadlines {
    #[serde(with = "duration_ms")]
    pub ack: Duration,
    #[serde(with = "duration_ms")]
    pub transfer: Duration,
}

impl Default for Deadlines {
    fn default() -> Self {
        Self { ack: Duration::from_secs(5), transfer: Duration::from_secs(30) }
    }
}

/// Per-(phase, node) progress of one expected frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FrameStatus {
    /// Not yet exposed.
    Pending,
    /// Exposure acknowledged; bytes not yet stored.
    Captured,
    Received,
    Missing,
}

impl FrameStatus {
    fn settled(self) -> bool {
        matches!(self, FrameStatus::Received | FrameStatus::Missing)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameSlot {
    pub phase: Phase,
    pub node_id: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSession {
    pub session_id: SessionId,
    pub state: SessionState,
    pub expected_nodes: BTreeSet<NodeId>,
    /// Expected nodes still taking part; silent or lost nodes are dropped.
    pub live: BTreeSet<NodeId>,
    /// Nodes that acknowledged the current ack state.
    pub acked: BTreeSet<NodeId>,
    /// Capture acknowledgements per phase.
    pub capture_acked: BTreeMap<Phase, BTreeSet<NodeId>>,
    pub frames: BTreeMap<FrameSlot, FrameStatus>,
    pub pattern: PatternSpec,
    pub light_level: LightLevel,
    pub deadlines: Deadlines,
    pub warnings: Vec<String>,
}

impl CaptureSession {
    pub fn new(
        session_id: SessionId,
        expected_nodes: BTreeSet<NodeId>,
        pattern: PatternSpec,
        light_level: LightLevel,
        deadlines: Deadlines,
    ) -> Self {
        let frames = Phase::BOTH
            .iter()
            .flat_map(|&phase| {
                expected_nodes.iter().map(move |n| (FrameSlot { phase, node_id: n.clone() }, FrameStatus::Pending))
            })
            .collect();
        Self {
            session_id,
            state: SessionState::Idle,
            live: expected_nodes.clone(),
            expected_nodes,
            acked: BTreeSet::new(),
            capture_acked: BTreeMap::new(),
            frames,
            pattern,
            light_level,
            deadlines,
            warnings: Vec::new(),
        }
    }

    pub fn status(&self, phase: Phase, node: &NodeId) -> Option<FrameStatus> {
        self.frames.get(&FrameSlot { phase, node_id: node.clone() }).copied()
    }

    /// `(phase, node)` pairs that will never be delivered.
    pub fn missing(&self) -> Vec<FrameSlot> {
        self.slots_with(FrameStatus::Missing)
    }

    pub fn received(&self) -> Vec<FrameSlot> {
        self.slots_with(FrameStatus::Received)
    }

    fn slots_with(&self, status: FrameStatus) -> Vec<FrameSlot> {
        self.frames.iter().filter(|(_, s)| **s == status).map(|(k, _)| k.clone()).collect()
    }

    pub fn frames_expected(&self) -> usize {
        self.frames.len()
    }

    pub fn frames_received(&self) -> usize {
        self.frames.values().filter(|s| **s == FrameStatus::Received).count()
    }

    /// Whether a capture command for `phase` has been fanned out already.
    pub fn phase_commanded(&self, phase: Phase) -> bool {
        let from = match phase {
            Phase::Texture => SessionState::TextureCapture,
            Phase::Pattern => SessionState::PatternCapture,
        };
        self.state.index() >= from.index()
    }

    fn set(&mut self, phase: Phase, node: &NodeId, status: FrameStatus) {
        if let Some(s) = self.frames.get_mut(&FrameSlot { phase, node_id: node.clone() }) {
            *s = status;
        }
    }

    /// Drops a node from the live set; its unexposed frames become Missing.
    /// Exposed frames stay Captured: the node may still hold them.
    fn drop_node(&mut self, node: &NodeId) {
        self.live.remove(node);
        self.acked.remove(node);
        for phase in Phase::BOTH {
            if self.status(phase, node) == Some(FrameStatus::Pending) {
                self.set(phase, node, FrameStatus::Missing);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionEvent {
    Start,
    LightAck {
        node_id: NodeId,
        ok: bool,
    },
    CaptureAck {
        node_id: NodeId,
        phase: Phase,
        ok: bool,
    },
    PatternAck {
        node_id: NodeId,
        ok: bool,
    },
    FrameReceived {
        node_id: NodeId,
        phase: Phase,
    },
    /// The deadline armed on entry to the given state expired.
    Timeout(SessionState),
    NodeLost(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SessionEffect {
    SendLights {
        nodes: Vec<NodeId>,
        level: LightLevel,
    },
    SendPattern {
        nodes: Vec<NodeId>,
        pattern: PatternSpec,
    },
    SendCapture {
        nodes: Vec<NodeId>,
        phase: Phase,
        pattern: Option<PatternSpec>,
    },
    ArmTimeout {
        state: SessionState,
        #[serde(with = "duration_ms")]
        after: Duration,
    },
    Finished(SessionState),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("event {event:?} is not possible in state {state}")]
pub struct IllegalEvent {
    pub state: SessionState,
    pub event: SessionEvent,
}

/// Advances a session by one event. Terminal sessions absorb every event
/// unchanged.
pub fn session_step(
    s: &CaptureSession,
    ev: SessionEvent,
) -> Result<(CaptureSession, Vec<SessionEffect>), IllegalEvent> {
    if s.state.is_terminal() {
        return Ok((s.clone(), Vec::new()));
    }
    let illegal = |ev: SessionEvent| Err(IllegalEvent { state: s.state, event: ev });
    let mut n = s.clone();
    let mut fx = Vec::new();
    match &ev {
        SessionEvent::Start => {
            if s.state != SessionState::Idle {
                return illegal(ev);
            }
            enter(&mut n, SessionState::LightsSet, &mut fx);
        }
        SessionEvent::LightAck { node_id, ok } => {
            if !s.expected_nodes.contains(node_id) || s.state != SessionState::LightsSet {
                return illegal(ev);
            }
            if n.live.contains(node_id) && n.acked.insert(node_id.clone()) && !ok {
                n.warnings.push(format!("{node_id}: light controller failed"));
            }
        }
        SessionEvent::PatternAck { node_id, ok } => {
            if !s.expected_nodes.contains(node_id) || s.state != SessionState::PatternProject {
                return illegal(ev);
            }
            if n.live.contains(node_id) && n.acked.insert(node_id.clone()) && !ok {
                n.warnings.push(format!("{node_id}: projector failed"));
            }
        }
        SessionEvent::CaptureAck { node_id, phase, ok } => {
            let want = match phase {
                Phase::Texture => SessionState::TextureCapture,
                Phase::Pattern => SessionState::PatternCapture,
            };
            if !s.expected_nodes.contains(node_id) || s.state != want {
                return illegal(ev);
            }
            if n.live.contains(node_id) && n.acked.insert(node_id.clone()) {
                n.capture_acked.entry(*phase).or_default().insert(node_id.clone());
                if n.status(*phase, node_id) == Some(FrameStatus::Pending) {
                    let status = if *ok { FrameStatus::Captured } else { FrameStatus::Missing };
                    n.set(*phase, node_id, status);
                }
                if !ok {
                    n.warnings.push(format!("{node_id}: {phase} capture failed"));
                }
            }
        }
        SessionEvent::FrameReceived { node_id, phase } => {
            if !s.expected_nodes.contains(node_id) || !s.state.accepts_frames() || !s.phase_commanded(*phase) {
                return illegal(ev);
            }
            n.set(*phase, node_id, FrameStatus::Received);
        }
        SessionEvent::NodeLost(node_id) => {
            if !s.expected_nodes.contains(node_id) {
                return illegal(ev);
            }
            if n.live.contains(node_id) {
                n.drop_node(node_id);
            }
        }
        SessionEvent::Timeout(state) => {
            if *state != s.state || s.state == SessionState::Idle {
                return illegal(ev);
            }
            if s.state == SessionState::Transferring {
                for status in n.frames.values_mut() {
                    if !status.settled() {
                        *status = FrameStatus::Missing;
                    }
                }
            } else {
                let silent: Vec<NodeId> = n.live.difference(&n.acked).cloned().collect();
                for node in &silent {
                    n.warnings.push(format!("{node}: no acknowledgement in {}", s.state));
                    n.drop_node(node);
                }
            }
        }
    }
    settle(&mut n, &mut fx);
    Ok((n, fx))
}

/// Follows every transition whose condition now holds.
fn settle(n: &mut CaptureSession, fx: &mut Vec<SessionEffect>) {
    loop {
        if n.state.awaits_acks() && n.live.is_subset(&n.acked) {
            let next = match n.state {
                SessionState::LightsSet => SessionState::TextureCapture,
                SessionState::TextureCapture => SessionState::PatternProject,
                SessionState::PatternProject => SessionState::PatternCapture,
                _ => SessionState::Transferring,
            };
            enter(n, next, fx);
            continue;
        }
        if n.state == SessionState::Transferring && n.frames.values().all(|s| s.settled()) {
            let done = if n.frames.values().all(|s| *s == FrameStatus::Received) {
                SessionState::Complete
            } else {
                SessionState::PartialFailure
            };
            n.state = done;
            fx.push(SessionEffect::Finished(done));
        }
        return;
    }
}

fn enter(n: &mut CaptureSession, next: SessionState, fx: &mut Vec<SessionEffect>) {
    n.state = next;
    n.acked.clear();
    if next == SessionState::LightsSet && n.expected_nodes.is_empty() {
        n.state = SessionState::Complete;
        fx.push(SessionEffect::Finished(SessionState::Complete));
        return;
    }
    let nodes: Vec<NodeId> = n.live.iter().cloned().collect();
    let after = match next {
        SessionState::Transferring => n.deadlines.transfer,
        _ => n.deadlines.ack,
    };
    if !nodes.is_empty() {
        match next {
            SessionState::LightsSet => fx.push(SessionEffect::SendLights { nodes, level: n.light_level }),
            SessionState::TextureCapture => {
                let black = PatternSpec::black(n.pattern.width, n.pattern.height);
                fx.push(SessionEffect::SendPattern { nodes: nodes.clone(), pattern: black });
                fx.push(SessionEffect::SendCapture { nodes, phase: Phase::Texture, pattern: None });
            }
            SessionState::PatternProject => fx.push(SessionEffect::SendPattern { nodes, pattern: n.pattern }),
            SessionState::PatternCapture => {
                fx.push(SessionEffect::SendCapture { nodes, phase: Phase::Pattern, pattern: Some(n.pattern) })
            }
            _ => {}
        }
    }
    if n.live.is_empty() && next.awaits_acks() {
        return;
    }
    fx.push(SessionEffect::ArmTimeout { state: next, after });
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nodes(k: usize) -> BTreeSet<NodeId> {
        (1..=k).map(|i| NodeId::new(format!("n{i:02}"))).collect()
    }

    fn session(k: usize) -> CaptureSession {
        CaptureSession::new(
            "s0001".into(),
            nodes(k),
            PatternSpec::random_dot(7, 0.5, 64, 40),
            LightLevel::Full,
            Deadlines::default(),
        )
    }

    fn run(s: &CaptureSession, events: &[SessionEvent]) -> (CaptureSession, Vec<SessionEffect>) {
        let mut cur = s.clone();
        let mut all = Vec::new();
        for ev in events {
            let (next, fx) = session_step(&cur, ev.clone()).unwrap_or_else(|e| panic!("{e}"));
            cur = next;
            all.extend(fx);
        }
        (cur, all)
    }

    fn per_node(k: usize, f: impl Fn(NodeId) -> SessionEvent) -> Vec<SessionEvent> {
        nodes(k).into_iter().map(f).collect()
    }

    fn happy_path(k: usize) -> Vec<SessionEvent> {
        let mut evs = vec![SessionEvent::Start];
        evs.extend(per_node(k, |n| SessionEvent::LightAck { node_id: n, ok: true }));
        evs.extend(per_node(k, |n| SessionEvent::CaptureAck { node_id: n, phase: Phase::Texture, ok: true }));
        evs.extend(per_node(k, |n| SessionEvent::PatternAck { node_id: n, ok: true }));
        evs.extend(per_node(k, |n| SessionEvent::CaptureAck { node_id: n, phase: Phase::Pattern, ok: true }));
        for phase in Phase::BOTH {
            evs.extend(per_node(k, |n| SessionEvent::FrameReceived { node_id: n, phase }));
        }
        evs
    }

    /// Transition table written out independently of `settle`/`enter`.
    fn table(state: SessionState, ev: &SessionEvent) -> Option<SessionState> {
        use SessionState::*;
        match (state, ev) {
            (Idle, SessionEvent::Start) => Some(LightsSet),
            (LightsSet, SessionEvent::LightAck { .. }) => Some(LightsSet),
            (TextureCapture, SessionEvent::CaptureAck { phase: Phase::Texture, .. }) => Some(TextureCapture),
            (PatternProject, SessionEvent::PatternAck { .. }) => Some(PatternProject),
            (PatternCapture, SessionEvent::CaptureAck { phase: Phase::Pattern, .. }) => Some(PatternCapture),
            (TextureCapture | PatternProject, SessionEvent::FrameReceived { phase: Phase::Texture, .. }) => Some(state),
            (PatternCapture | Transferring, SessionEvent::FrameReceived { .. }) => Some(state),
            _ => None,
        }
    }

    #[test]
    fn three_node_happy_path_matches_table() {
        let s = session(3);
        let evs = happy_path(3);
        let mut cur = s.clone();
        let mut visited = vec![cur.state];
        for (i, ev) in evs.iter().enumerate() {
            let expected = table(cur.state, ev);
            assert!(expected.is_some(), "step {i}: table rejects {ev:?} in {}", cur.state);
            let (next, _) = session_step(&cur, ev.clone()).unwrap();
            if next.state != cur.state {
                visited.push(next.state);
            }
            cur = next;
        }
        assert_eq!(
            visited,
            vec![
                SessionState::Idle,
                SessionState::LightsSet,
                SessionState::TextureCapture,
                SessionState::PatternProject,
                SessionState::PatternCapture,
                SessionState::Transferring,
                SessionState::Complete,
            ]
        );
        assert_eq!(cur.frames_received(), 6);
        assert!(cur.missing().is_empty());
    }

    #[test]
    fn idle_frame_is_illegal_and_unchanged() {
        let s = session(3);
        let err =
            session_step(&s, SessionEvent::FrameReceived { node_id: "n01".into(), phase: Phase::Texture }).unwrap_err();
        assert_eq!(err.state, SessionState::Idle);
        assert_eq!(s.state, SessionState::Idle);
    }

    #[test]
    fn texture_timeout_drops_exactly_the_silent_node() {
        let s = session(3);
        let mut evs = vec![SessionEvent::Start];
        evs.extend(per_node(3, |n| SessionEvent::LightAck { node_id: n, ok: true }));
        evs.push(SessionEvent::CaptureAck { node_id: "n01".into(), phase: Phase::Texture, ok: true });
        evs.push(SessionEvent::CaptureAck { node_id: "n02".into(), phase: Phase::Texture, ok: true });
        evs.push(SessionEvent::Timeout(SessionState::TextureCapture));
        evs.extend(["n01", "n02"].map(|n| SessionEvent::PatternAck { node_id: n.into(), ok: true }));
        evs.extend(["n01", "n02"].map(|n| SessionEvent::CaptureAck {
            node_id: n.into(),
            phase: Phase::Pattern,
            ok: true,
        }));
        for phase in Phase::BOTH {
            evs.extend(["n01", "n02"].map(|n| SessionEvent::FrameReceived { node_id: n.into(), phase }));
        }
        let (end, _) = run(&s, &evs);
        assert_eq!(end.state, SessionState::PartialFailure);
        let missing: Vec<_> = end.missing();
        assert_eq!(
            missing,
            vec![
                FrameSlot { phase: Phase::Texture, node_id: "n03".into() },
                FrameSlot { phase: Phase::Pattern, node_id: "n03".into() },
            ]
        );
    }

    #[test]
    fn zero_nodes_complete_on_start() {
        let s = session(0);
        let (end, fx) = session_step(&s, SessionEvent::Start).unwrap();
        assert_eq!(end.state, SessionState::Complete);
        assert_eq!(fx, vec![SessionEffect::Finished(SessionState::Complete)]);
        assert_eq!(end.frames_expected(), 0);
    }

    #[test]
    fn pattern_fanout_waits_for_last_texture_ack() {
        let s = session(2);
        let mut evs = vec![SessionEvent::Start];
        evs.extend(per_node(2, |n| SessionEvent::LightAck { node_id: n, ok: true }));
        evs.push(SessionEvent::CaptureAck { node_id: "n01".into(), phase: Phase::Texture, ok: true });
        let (mid, fx) = run(&s, &evs);
        assert_eq!(mid.state, SessionState::TextureCapture);
        assert!(!fx.iter().any(
            |f| matches!(f, SessionEffect::SendPattern { pattern, .. } if pattern.kind == crate::PatternKind::RandomDot)
        ));
        let (after, fx) =
            session_step(&mid, SessionEvent::CaptureAck { node_id: "n02".into(), phase: Phase::Texture, ok: true })
                .unwrap();
        assert_eq!(after.state, SessionState::PatternProject);
        assert!(matches!(&fx[0], SessionEffect::SendPattern { nodes, .. } if nodes.len() == 2));
    }

    #[test]
    fn lost_node_keeps_captured_frames_until_transfer_deadline() {
        let s = session(2);
        let mut evs = vec![SessionEvent::Start];
        evs.extend(per_node(2, |n| SessionEvent::LightAck { node_id: n, ok: true }));
        evs.extend(per_node(2, |n| SessionEvent::CaptureAck { node_id: n, phase: Phase::Texture, ok: true }));
        evs.push(SessionEvent::NodeLost("n02".into()));
        let (mid, _) = run(&s, &evs);
        assert_eq!(mid.status(Phase::Texture, &"n02".into()), Some(FrameStatus::Captured));
        assert_eq!(mid.status(Phase::Pattern, &"n02".into()), Some(FrameStatus::Missing));
        let mut rest = vec![
            SessionEvent::PatternAck { node_id: "n01".into(), ok: true },
            SessionEvent::CaptureAck { node_id: "n01".into(), phase: Phase::Pattern, ok: true },
        ];
        for phase in Phase::BOTH {
            rest.push(SessionEvent::FrameReceived { node_id: "n01".into(), phase });
        }
        let (waiting, _) = run(&mid, &rest);
        assert_eq!(waiting.state, SessionState::Transferring);
        // a late delivery from the reconnected node still counts
        let (done, _) = run(&waiting, &[SessionEvent::FrameReceived { node_id: "n02".into(), phase: Phase::Texture }]);
        assert_eq!(done.state, SessionState::PartialFailure);
        assert_eq!(done.missing().len(), 1);

        let (expired, _) = run(&waiting, &[SessionEvent::Timeout(SessionState::Transferring)]);
        assert_eq!(expired.state, SessionState::PartialFailure);
        assert_eq!(expired.missing().len(), 2);
    }

    #[test]
    fn all_nodes_lost_advances_to_partial_failure() {
        let s = session(2);
        let (end, _) =
            run(&s, &[SessionEvent::Start, SessionEvent::NodeLost("n01".into()), SessionEvent::NodeLost("n02".into())]);
        assert_eq!(end.state, SessionState::PartialFailure);
        assert_eq!(end.missing().len(), 4);
    }

    #[test]
    fn failed_capture_marks_pair_missing_but_keeps_node() {
        let s = session(1);
        let (end, _) = run(
            &s,
            &[
                SessionEvent::Start,
                SessionEvent::LightAck { node_id: "n01".into(), ok: true },
                SessionEvent::CaptureAck { node_id: "n01".into(), phase: Phase::Texture, ok: false },
                SessionEvent::PatternAck { node_id: "n01".into(), ok: true },
                SessionEvent::CaptureAck { node_id: "n01".into(), phase: Phase::Pattern, ok: true },
                SessionEvent::FrameReceived { node_id: "n01".into(), phase: Phase::Pattern },
            ],
        );
        assert_eq!(end.state, SessionState::PartialFailure);
        assert_eq!(end.missing(), vec![FrameSlot { phase: Phase::Texture, node_id: "n01".into() }]);
    }

    #[test]
    fn stale_timeout_and_foreign_node_are_illegal() {
        let s = session(1);
        let (lights, _) = run(&s, &[SessionEvent::Start]);
        assert!(session_step(&lights, SessionEvent::Timeout(SessionState::PatternCapture)).is_err());
        assert!(session_step(&lights, SessionEvent::LightAck { node_id: "n99".into(), ok: true }).is_err());
        assert!(session_step(&lights, SessionEvent::NodeLost("n99".into())).is_err());
    }

    #[test]
    fn terminal_absorbs() {
        let s = session(1);
        let (done, _) = run(&s, &happy_path(1));
        assert_eq!(done.state, SessionState::Complete);
        for ev in [SessionEvent::Start, SessionEvent::NodeLost("n01".into()), SessionEvent::Timeout(SessionState::Idle)]
        {
            let (same, fx) = session_step(&done, ev).unwrap();
            assert_eq!(same, done);
            assert!(fx.is_empty());
        }
    }

    fn arb_event(k: usize) -> impl Strategy<Value = SessionEvent> {
        let node = (1..=k + 1).prop_map(|i| NodeId::new(format!("n{i:02}")));
        let phase = prop_oneof![Just(Phase::Texture), Just(Phase::Pattern)];
        let state = prop_oneof![
            Just(SessionState::LightsSet),
            Just(SessionState::TextureCapture),
            Just(SessionState::PatternProject),
            Just(SessionState::PatternCapture),
            Just(SessionState::Transferring),
        ];
        prop_oneof![
            1 => Just(SessionEvent::Start),
            4 => (node.clone(), any::<bool>()).prop_map(|(node_id, ok)| SessionEvent::LightAck { node_id, ok }),
            4 => (node.clone(), phase.clone(), any::<bool>())
                .prop_map(|(node_id, phase, ok)| SessionEvent::CaptureAck { node_id, phase, ok }),
            4 => (node.clone(), any::<bool>()).prop_map(|(node_id, ok)| SessionEvent::PatternAck { node_id, ok }),
            4 => (node.clone(), phase).prop_map(|(node_id, phase)| SessionEvent::FrameReceived { node_id, phase }),
            1 => state.prop_map(SessionEvent::Timeout),
            1 => node.prop_map(SessionEvent::NodeLost),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn random_interleavings_keep_invariants(events in prop::collection::vec(arb_event(4), 0..120)) {
            let mut cur = session(4);
            let mut texture_sent = BTreeSet::new();
            let mut texture_acks = BTreeSet::new();
            for ev in events {
                let before = cur.clone();
                match session_step(&cur, ev.clone()) {
                    Err(e) => {
                        prop_assert_eq!(e.state, before.state);
                        continue;
                    }
                    Ok((next, fx)) => {
                        prop_assert!(next.state.index() >= before.state.index());
                        if before.state.is_terminal() {
                            prop_assert_eq!(&next, &before);
                        }
                        if let SessionEvent::CaptureAck { node_id, phase: Phase::Texture, .. } = &ev {
                            texture_acks.insert(node_id.clone());
                        }
                        for f in &fx {
                            match f {
                                SessionEffect::SendCapture { nodes, phase: Phase::Texture, .. } => {
                                    texture_sent.extend(nodes.iter().cloned());
                                }
                                SessionEffect::SendCapture { nodes, phase: Phase::Pattern, .. } => {
                                    for n in nodes {
                                        prop_assert!(texture_sent.contains(n), "pattern before texture for {}", n);
                                    }
                                }
                                SessionEffect::SendPattern { nodes, pattern } if pattern.kind == crate::PatternKind::RandomDot => {
                                    // every live node acknowledged its texture exposure first
                                    for n in nodes {
                                        prop_assert!(texture_acks.contains(n));
                                    }
                                }
                                _ => {}
                            }
                        }
                        // once received, always received
                        for (slot, st) in &before.frames {
                            if *st == FrameStatus::Received {
                                prop_assert_eq!(next.frames[slot], FrameStatus::Received);
                            }
                        }
                        prop_assert!(next.live.is_subset(&next.expected_nodes));
                        if next.state.is_terminal() {
                            prop_assert!(next.frames.values().all(|s| s.settled()));
                            let all_received = next.frames.values().all(|s| *s == FrameStatus::Received);
                            prop_assert_eq!(next.state == SessionState::Complete, all_received);
                        }
                        cur = next;
                    }
                }
            }
        }
    }
}
