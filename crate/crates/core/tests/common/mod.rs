//! Shared generators for the integration tests.
#![allow(dead_code)]

use digitizer_core::protocol::{
    AckFailure, AckStep, Body, CaptureAck, CaptureCommand, ErrorCode, ErrorMessage, FleetCommand, FleetOutcome,
    FleetResult, FrameChunk, FrameComplete, FrameHeader, FrameKey, FrameMetadata, Heartbeat, Hello, HelloAck,
    LightCommand, Message, PatternCommand,
};
use digitizer_core::{LightLevel, NodeId, PatternKind, PatternSpec, Phase, SessionId, Timestamp};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;

pub fn arb_node() -> impl Strategy<Value = NodeId> {
    "[a-z0-9_-]{1,12}".prop_map(NodeId::new)
}

pub fn arb_session() -> impl Strategy<Value = SessionId> {
    "s[0-9]{4}".prop_map(SessionId::new)
}

pub fn arb_phase() -> impl Strategy<Value = Phase> {
    prop_oneof![Just(Phase::Texture), Just(Phase::Pattern)]
}

pub fn arb_level() -> impl Strategy<Value = LightLevel> {
    prop::sample::select(LightLevel::ALL.to_vec())
}

pub fn arb_pattern() -> impl Strategy<Value = PatternSpec> {
    (any::<bool>(), any::<u64>(), 0.0f64..=1.0, 1u32..4096, 1u32..4096).prop_map(|(black, seed, density, w, h)| {
        PatternSpec {
            kind: if black { PatternKind::Black } else { PatternKind::RandomDot },
            seed,
            density,
            width: w,
            height: h,
        }
    })
}

pub fn arb_key() -> impl Strategy<Value = FrameKey> {
    (arb_session(), arb_node(), arb_phase()).prop_map(|(session_id, node_id, phase)| FrameKey {
        session_id,
        node_id,
        phase,
    })
}

pub fn arb_meta() -> impl Strategy<Value = FrameMetadata> {
    (arb_node(), arb_session(), arb_phase(), 1u32..5000, 1u32..5000, any::<u64>(), "[0-9a-f]{64}", any::<u64>())
        .prop_map(|(node_id, session_id, phase, width, height, byte_size, checksum, at)| FrameMetadata {
            node_id,
            session_id,
            phase,
            width,
            height,
            byte_size,
            checksum,
            captured_at: Timestamp::from_micros(at),
        })
}

fn arb_failure() -> impl Strategy<Value = Option<AckFailure>> {
    prop_oneof![
        Just(None),
        ".{0,20}".prop_map(|s| Some(AckFailure::BackendFailure(s))),
        ".{0,20}".prop_map(|s| Some(AckFailure::DeadlineExceeded(s))),
        any::<u32>().prop_map(|c| Some(AckFailure::ControllerUnreachable(c))),
        ".{0,20}".prop_map(|s| Some(AckFailure::ProjectorFailure(s))),
    ]
}

fn arb_step() -> impl Strategy<Value = AckStep> {
    prop_oneof![Just(AckStep::Lights), Just(AckStep::Projection), arb_phase().prop_map(AckStep::Capture)]
}

fn arb_code() -> impl Strategy<Value = ErrorCode> {
    prop::sample::select(vec![
        ErrorCode::NotRegistered,
        ErrorCode::SlotConflict,
        ErrorCode::OutOfRig,
        ErrorCode::UnknownNode,
        ErrorCode::UnknownSession,
        ErrorCode::SessionClosed,
        ErrorCode::PhaseMismatch,
        ErrorCode::ChecksumMismatch,
        ErrorCode::ChunkOutOfOrder,
        ErrorCode::TransferFailed,
        ErrorCode::Malformed,
    ])
}

pub fn arb_body() -> impl Strategy<Value = Body> {
    prop_oneof![
        (arb_node(), any::<u32>(), any::<u32>()).prop_map(|(node_id, beam, slot)| Body::Hello(Hello {
            node_id,
            beam,
            slot
        })),
        (arb_node(), any::<u64>())
            .prop_map(|(node_id, heartbeat_period_ms)| Body::HelloAck(HelloAck { node_id, heartbeat_period_ms })),
        (arb_node(), any::<u64>()).prop_map(|(node_id, seq)| Body::Heartbeat(Heartbeat { node_id, seq })),
        (arb_session(), arb_phase(), arb_pattern(), any::<u64>()).prop_map(
            |(session_id, phase, p, exposure_deadline)| {
                Body::CaptureCommand(CaptureCommand {
                    session_id,
                    phase,
                    pattern_ref: (phase == Phase::Pattern).then_some(p),
                    exposure_deadline,
                })
            }
        ),
        (prop::option::of(arb_session()), arb_level())
            .prop_map(|(session_id, level)| Body::LightCommand(LightCommand { session_id, level })),
        (prop::option::of(arb_session()), arb_pattern())
            .prop_map(|(session_id, pattern)| Body::PatternCommand(PatternCommand { session_id, pattern })),
        (prop::option::of(arb_session()), arb_node(), arb_step(), arb_failure()).prop_map(
            |(session_id, node_id, step, failure)| Body::CaptureAck(CaptureAck { session_id, node_id, step, failure })
        ),
        (arb_meta(), any::<u32>())
            .prop_map(|(frame, chunk_count)| Body::FrameHeader(FrameHeader { frame, chunk_count })),
        (arb_key(), any::<u32>(), prop::collection::vec(any::<u8>(), 0..2048))
            .prop_map(|(key, index, data)| Body::FrameChunk(FrameChunk { key, index, data })),
        (arb_key(), "[0-9a-f]{64}").prop_map(|(key, checksum)| Body::FrameComplete(FrameComplete { key, checksum })),
        (any::<u64>(), ".{1,40}", any::<u64>())
            .prop_map(|(job_id, command, timeout_ms)| Body::FleetCommand(FleetCommand { job_id, command, timeout_ms })),
        (
            any::<u64>(),
            arb_node(),
            prop_oneof![
                (any::<i32>(), ".{0,40}").prop_map(|(code, output)| FleetOutcome::Exited { code, output }),
                Just(FleetOutcome::TimedOut),
            ],
            any::<u64>()
        )
            .prop_map(|(job_id, node_id, outcome, duration_ms)| Body::FleetResult(FleetResult {
                job_id,
                node_id,
                outcome,
                duration_ms
            })),
        (arb_code(), ".{0,40}", prop::option::of(arb_key()))
            .prop_map(|(code, message, frame)| Body::Error(ErrorMessage { code, message, frame })),
    ]
}

pub fn arb_message() -> impl Strategy<Value = Message> {
    arb_body().prop_map(Message::new)
}

/// `n` messages from a fixed-seed runner, so failures reproduce.
pub fn sample_messages(n: usize) -> Vec<Message> {
    let mut runner = TestRunner::deterministic();
    let strategy = arb_message();
    (0..n).map(|_| strategy.new_tree(&mut runner).expect("strategy yields").current()).collect()
}
